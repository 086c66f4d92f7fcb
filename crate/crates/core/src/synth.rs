//! Synthetic corpora with known ground truth, used by the acceptance suite,
//! the benches and `gen-synthetic`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::rowstore::{ingest, RowStore};
use crate::schema::{parse_schema, Schema};

/// A generated schema and record set plus whatever the generator knows that
/// the data does not say outright.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub name: &'static str,
    pub schema: String,
    pub records: Vec<Value>,
    pub truth: Value,
}

impl Corpus {
    pub fn jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        s
    }

    pub fn parsed_schema(&self) -> Schema {
        parse_schema(&self.schema).expect("generated schema is valid")
    }

    /// Parse and ingest; generated records are always clean.
    pub fn load(&self) -> (Schema, RowStore) {
        let schema = self.parsed_schema();
        let out = ingest(&schema, self.jsonl().as_bytes()).expect("in-memory ingest");
        assert!(out.errors.is_empty(), "generator produced bad records: {:?}", out.errors.first());
        (schema, out.store)
    }

    /// Writes `schema.json`, `data.jsonl` and `truth.json` under `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("schema.json"), &self.schema)?;
        std::fs::write(dir.join("data.jsonl"), self.jsonl())?;
        std::fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&self.truth).expect("json") + "\n")
    }
}

pub const GENERATORS: [&str; 5] = ["label-recovery", "noise-aware", "slicing", "scaling", "running-example"];

pub fn generate(name: &str, n: Option<usize>, seed: u64) -> Option<Corpus> {
    Some(match name {
        "label-recovery" => label_recovery(n.unwrap_or(20_000), seed),
        "noise-aware" => noise_aware(n.unwrap_or(1_000), seed),
        "slicing" => slicing(n.unwrap_or(4_000), seed),
        "scaling" => scaling(n.unwrap_or(3_200), seed),
        "running-example" => running_example(n.unwrap_or(200), seed),
        _ => return None,
    })
}

fn vote(source: &str, value: Value) -> Value {
    json!({"source": source, "value": value})
}

/// A class that is right with probability `acc`, otherwise uniformly wrong.
fn noisy_class(rng: &mut ChaCha8Rng, truth: usize, k: usize, acc: f64) -> usize {
    if rng.gen_bool(acc) {
        truth
    } else {
        let w = rng.gen_range(0..k - 1);
        if w >= truth {
            w + 1
        } else {
            w
        }
    }
}

fn sample_class(rng: &mut ChaCha8Rng, prior: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    prior.len() - 1
}

pub const RECOVERY_ACCURACIES: [f64; 5] = [0.9, 0.8, 0.7, 0.6, 0.55];
pub const RECOVERY_PRIOR: [f64; 3] = [0.5, 0.3, 0.2];
pub const RECOVERY_ABSTAIN: f64 = 0.3;

/// Three classes, five conditionally independent sources with symmetric
/// noise, each abstaining at random.
pub fn label_recovery(n: usize, seed: u64) -> Corpus {
    let classes = ["a", "b", "c"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let y = sample_class(&mut rng, &RECOVERY_PRIOR);
        let mut votes = Vec::new();
        for (s, &acc) in RECOVERY_ACCURACIES.iter().enumerate() {
            if rng.gen_bool(RECOVERY_ABSTAIN) {
                continue;
            }
            votes.push(vote(&format!("s{s}"), json!(classes[noisy_class(&mut rng, y, 3, acc)])));
        }
        records.push(json!({"x": format!("u{i}"), "supervision": {"Y": votes}, "tags": ["train"]}));
        truth.push(y);
    }
    let accuracies: serde_json::Map<String, Value> =
        RECOVERY_ACCURACIES.iter().enumerate().map(|(s, a)| (format!("s{s}"), json!(a))).collect();
    Corpus {
        name: "label-recovery",
        schema: r#"{"payloads": [{"name": "x", "kind": "singleton", "inputs": [{"field": "x"}]}],
 "tasks": [{"name": "Y", "payload": "x", "kind": {"multiclass": ["a", "b", "c"]}}]}
"#
        .into(),
        records,
        truth: json!({"accuracies": accuracies, "prior": RECOVERY_PRIOR, "abstain": RECOVERY_ABSTAIN, "labels": truth}),
    }
}

pub const NOISE_AWARE_ACCURACIES: [f64; 3] = [0.85, 0.7, 0.55];

/// Binary task over `n` distinct items. Each item's three source votes are
/// drawn once, so a source's mistakes are systematic for that item rather
/// than fresh noise a model could average away. Every item appears once in
/// train (weak votes) and once in test (clean label).
pub fn noise_aware(n: usize, seed: u64) -> Corpus {
    let classes = ["neg", "pos"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(2 * n);
    let mut test = Vec::with_capacity(n);
    for i in 0..n {
        let y = rng.gen_range(0..2);
        let item = format!("item{i}");
        let votes: Vec<Value> = NOISE_AWARE_ACCURACIES
            .iter()
            .enumerate()
            .map(|(s, &acc)| vote(&format!("s{s}"), json!(classes[noisy_class(&mut rng, y, 2, acc)])))
            .collect();
        records.push(json!({"x": item, "supervision": {"Y": votes}, "tags": ["train"]}));
        test.push(json!({"x": item, "supervision": {"Y": [vote("gold", json!(classes[y]))]}, "tags": ["test"]}));
    }
    records.extend(test);
    Corpus {
        name: "noise-aware",
        schema: r#"{"payloads": [{"name": "x", "kind": "singleton", "inputs": [{"field": "x"}]}],
 "tasks": [{"name": "Y", "payload": "x", "kind": {"multiclass": ["neg", "pos"]}}]}
"#
        .into(),
        records,
        truth: json!({"accuracies": {"s0": 0.85, "s1": 0.7, "s2": 0.55}}),
    }
}

const POSITIVE: [&str; 6] = ["good", "great", "fine", "nice", "superb", "lovely"];
const NEGATIVE: [&str; 6] = ["bad", "poor", "awful", "dull", "weak", "grim"];
pub const SLICE_TAG: &str = "inverted";
pub const SLICE_RATE: f64 = 0.05;

/// Sentiment-word classification where a 5% subpopulation, marked by a topic
/// word, has the relation inverted. The slice tag marks that subpopulation in
/// every split. 60% train, 10% dev, 30% test.
pub fn slicing(n: usize, seed: u64) -> Corpus {
    let classes = ["neg", "pos"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let in_slice = rng.gen_bool(SLICE_RATE);
        let polarity = rng.gen_range(0..2usize);
        let y = if in_slice { 1 - polarity } else { polarity };
        let lex = if polarity == 1 { &POSITIVE } else { &NEGATIVE };
        let mut tokens: Vec<String> = (0..rng.gen_range(2..5)).map(|_| format!("w{}", rng.gen_range(0..40))).collect();
        tokens.push(lex.choose(&mut rng).unwrap().to_string());
        if in_slice {
            tokens.push(["sarcasm", "irony"].choose(&mut rng).unwrap().to_string());
        }
        tokens.shuffle(&mut rng);
        let split = match i % 10 {
            0..=5 => "train",
            6 => "dev",
            _ => "test",
        };
        let mut tags = vec![split];
        if in_slice {
            tags.push(SLICE_TAG);
        }
        records.push(json!({"tokens": tokens, "supervision": {"Y": [vote("gold", json!(classes[y]))]}, "tags": tags}));
    }
    Corpus {
        name: "slicing",
        schema: r#"{"payloads": [{"name": "tokens", "kind": "sequence", "inputs": [{"field": "tokens"}]},
  {"name": "sentence", "kind": "singleton", "inputs": [{"payload": "tokens"}]}],
 "tasks": [{"name": "Y", "payload": "sentence", "kind": {"multiclass": ["neg", "pos"]}}],
 "slices": [{"tag": "inverted"}]}
"#
        .into(),
        records,
        truth: json!({"slice": SLICE_TAG, "rate": SLICE_RATE}),
    }
}

/// Three tasks, one per payload kind: a topic label for the sentence, a
/// per-token "place" bit, and selection of the entity naming a person. Each
/// class is signalled by many rare words, so accuracy grows with coverage.
/// 50% train, 10% dev, 40% test.
pub fn scaling(n: usize, seed: u64) -> Corpus {
    let topics = ["sport", "music", "food"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let topic = rng.gen_range(0..3usize);
        let mut tokens: Vec<String> = Vec::new();
        let mut place = Vec::new();
        let len = rng.gen_range(5..9);
        for _ in 0..len {
            match rng.gen_range(0..10) {
                0..=2 => {
                    tokens.push(format!("{}{}", topics[topic], rng.gen_range(0..60)));
                    place.push(false);
                }
                3..=4 => {
                    tokens.push(format!("city{}", rng.gen_range(0..80)));
                    place.push(true);
                }
                _ => {
                    tokens.push(format!("w{}", rng.gen_range(0..100)));
                    place.push(false);
                }
            }
        }
        // two or three entities over single tokens; exactly one is a person
        let k = rng.gen_range(2..4);
        let mut slots: Vec<usize> = (0..len).collect();
        slots.shuffle(&mut rng);
        let slots = &slots[..k];
        let target = rng.gen_range(0..k);
        let mut entities = Vec::new();
        for (j, &pos) in slots.iter().enumerate() {
            if j == target {
                tokens[pos] = format!("person{}", rng.gen_range(0..80));
            } else if tokens[pos].starts_with("person") {
                tokens[pos] = format!("w{}", rng.gen_range(0..100));
            }
            place[pos] = tokens[pos].starts_with("city");
            entities.push(json!({"id": format!("e{j}"), "span": [pos, pos + 1]}));
        }
        let bits: Vec<Value> = place.iter().map(|&p| if p { json!(["place"]) } else { json!([]) }).collect();
        let split = match i % 10 {
            0..=4 => "train",
            5 => "dev",
            _ => "test",
        };
        records.push(json!({
            "tokens": tokens,
            "entities": entities,
            "supervision": {
                "Topic": [vote("gold", json!(topics[topic]))],
                "Place": [vote("gold", json!(bits))],
                "Person": [vote("gold", json!(format!("e{target}")))]
            },
            "tags": [split]
        }));
    }
    Corpus {
        name: "scaling",
        schema: r#"{"payloads": [{"name": "tokens", "kind": "sequence", "inputs": [{"field": "tokens"}]},
  {"name": "entities", "kind": "set", "inputs": [{"field": "entities"}, {"payload": "tokens", "span_field": "span"}]},
  {"name": "sentence", "kind": "singleton", "inputs": [{"payload": "tokens"}]}],
 "tasks": [{"name": "Topic", "payload": "sentence", "kind": {"multiclass": ["sport", "music", "food"]}},
  {"name": "Place", "payload": "tokens", "kind": {"bitvector": ["place"]}},
  {"name": "Person", "payload": "sentence", "kind": {"select": "entities"}}]}
"#
        .into(),
        records,
        truth: json!({"tasks": {"Topic": "singleton", "Place": "sequence", "Person": "set"}}),
    }
}

pub const RUNNING_SCHEMA: &str = r#"{
  "payloads": [
    {"name": "tokens", "kind": "sequence", "inputs": [{"field": "tokens"}]},
    {"name": "entities", "kind": "set", "inputs": [{"field": "entities"}, {"payload": "tokens", "span_field": "span"}]},
    {"name": "query", "kind": "singleton", "inputs": [{"payload": "tokens"}, {"payload": "entities"}]}
  ],
  "tasks": [
    {"name": "Intent", "payload": "query", "kind": {"multiclass": ["height", "age", "none"]}},
    {"name": "EntityType", "payload": "tokens", "kind": {"bitvector": ["location", "country", "person"]}},
    {"name": "IntentArg", "payload": "query", "kind": {"select": "entities"}}
  ],
  "slices": [{"tag": "nutrition", "tasks": ["Intent"]}],
  "tuning": {
    "search_space": {"encoder": ["mean_pool", "max_pool", "conv1d:3", "recurrent"], "hidden_dim": [8, 16], "learning_rate": [0.1, 0.3]},
    "pinned": {"embed_dim": 8, "epochs": 20, "batch_size": 8},
    "budget": 2,
    "seed": 7
  }
}
"#;

/// Factoid-style queries: how tall / how old is the entity, or neither. Two
/// noisy heuristic sources plus a crowd source on about half the rows.
pub fn running_example(n: usize, seed: u64) -> Corpus {
    let people = ["obama", "merkel", "bowie", "curie", "lincoln", "einstein"];
    let countries = ["france", "japan", "peru", "kenya"];
    let cities = ["paris", "tokyo", "lima", "nairobi", "austin"];
    let foods = ["banana", "apple", "rice", "cheese"];
    let intents = ["height", "age", "none"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let intent = rng.gen_range(0..3usize);
        let nutrition = intent == 2 && rng.gen_bool(0.4);
        let mut tokens: Vec<&str> = match intent {
            0 => vec!["how", "tall", "is"],
            1 => vec!["how", "old", "is"],
            _ if nutrition => vec!["calories", "in"],
            _ => vec!["weather", "in"],
        };
        let (subject, subject_bit) = if nutrition {
            (*foods.choose(&mut rng).unwrap(), None)
        } else if intent == 2 {
            (*cities.choose(&mut rng).unwrap(), Some(0))
        } else {
            (*people.choose(&mut rng).unwrap(), Some(2))
        };
        let subject_pos = tokens.len();
        tokens.push(subject);
        let mut bits: Vec<Vec<&str>> = vec![vec![]; tokens.len()];
        if let Some(b) = subject_bit {
            bits[subject_pos].push(["location", "country", "person"][b]);
        }
        let mut entities = vec![json!({"id": subject, "span": [subject_pos, subject_pos + 1]})];
        if rng.gen_bool(0.5) {
            tokens.push("from");
            bits.push(vec![]);
            let c = *countries.choose(&mut rng).unwrap();
            let p = tokens.len();
            tokens.push(c);
            bits.push(vec!["location", "country"]);
            entities.push(json!({"id": c, "span": [p, p + 1]}));
        }
        entities.shuffle(&mut rng);

        let mut sup = serde_json::Map::new();
        let heuristic = if rng.gen_bool(0.85) { intent } else { rng.gen_range(0..3) };
        let mut intent_votes = vec![vote("keyword", json!(intents[heuristic]))];
        if rng.gen_bool(0.5) {
            let crowd = noisy_class(&mut rng, intent, 3, 0.9);
            intent_votes.push(vote("crowd", json!(intents[crowd])));
        }
        sup.insert("Intent".into(), Value::Array(intent_votes));
        let lexicon: Vec<Value> = bits
            .iter()
            .map(|b| if rng.gen_bool(0.1) { Value::Null } else { json!(b) })
            .collect();
        sup.insert("EntityType".into(), json!([vote("lexicon", Value::Array(lexicon))]));
        if intent != 2 {
            sup.insert("IntentArg".into(), json!([vote("keyword", json!(subject))]));
        }
        let split = match i % 10 {
            0..=6 => "train",
            7 => "dev",
            _ => "test",
        };
        let mut tags = vec![split];
        if nutrition {
            tags.push("nutrition");
        }
        records.push(json!({"tokens": tokens, "entities": entities, "supervision": sup, "tags": tags}));
    }
    Corpus { name: "running-example", schema: RUNNING_SCHEMA.into(), records, truth: json!({}) }
}

/// A serving-time query for the running example (no supervision, no tags).
pub fn running_example_query() -> Value {
    json!({"tokens": ["how", "tall", "is", "obama"], "entities": [{"id": "obama", "span": [3, 4]}]})
}

// ---- random instances for round-trip checks ------------------------------

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    &xs[rng.gen_range(0..xs.len())]
}

fn label_names(rng: &mut ChaCha8Rng, prefix: &str) -> Vec<Value> {
    (0..rng.gen_range(1..5)).map(|i| json!(format!("{prefix}{i}"))).collect()
}

fn random_param(rng: &mut ChaCha8Rng, key: &str) -> Value {
    match key {
        "encoder" => json!(pick(rng, &["mean_pool", "max_pool", "conv1d:1", "conv1d:3", "conv1d:5", "recurrent"])),
        "learning_rate" => json!(*pick(rng, &[0.01, 0.05, 0.1, 0.5])),
        _ => json!(rng.gen_range(1..64)),
    }
}

/// A random valid schema document covering every payload kind, reference
/// form, task kind, slices and tuning.
pub fn random_schema_json(rng: &mut ChaCha8Rng) -> String {
    let mut payloads = Vec::new();
    let mut seqs: Vec<String> = Vec::new();
    let mut sets: Vec<String> = Vec::new();
    let mut singles: Vec<String> = Vec::new();
    for i in 0..rng.gen_range(1..3) {
        let name = format!("seq{i}");
        let mut inputs = vec![json!({"field": format!("tok{i}")})];
        if rng.gen_bool(0.3) {
            inputs.push(json!({"field": format!("pos{i}")}));
        }
        if let Some(prev) = seqs.last().filter(|_| rng.gen_bool(0.3)) {
            inputs.push(json!({"payload": prev}));
        }
        let mut p = json!({"name": name, "kind": "sequence", "inputs": inputs});
        if rng.gen_bool(0.3) {
            p["embed_dim"] = if rng.gen_bool(0.5) { json!("auto") } else { json!(rng.gen_range(1..32)) };
        }
        payloads.push(p);
        seqs.push(name);
    }
    for j in 0..rng.gen_range(0..3) {
        let name = format!("set{j}");
        let mut inputs = vec![json!({"field": format!("ents{j}")})];
        if rng.gen_bool(0.7) {
            inputs.push(json!({"payload": pick(rng, &seqs), "span_field": "span"}));
        }
        payloads.push(json!({"name": name, "kind": "set", "inputs": inputs}));
        sets.push(name);
    }
    for k in 0..rng.gen_range(1..3) {
        let name = format!("sing{k}");
        let mut inputs = Vec::new();
        if rng.gen_bool(0.5) {
            inputs.push(json!({"field": format!("txt{k}")}));
        }
        for src in seqs.iter().chain(&sets).chain(&singles) {
            if rng.gen_bool(0.4) {
                inputs.push(json!({"payload": src}));
            }
        }
        if inputs.is_empty() {
            inputs.push(json!({"payload": pick(rng, &seqs)}));
        }
        payloads.push(json!({"name": name, "kind": "singleton", "inputs": inputs}));
        singles.push(name);
    }
    payloads.shuffle(rng);

    let mut tasks = Vec::new();
    for t in 0..rng.gen_range(1..4) {
        let name = format!("T{t}");
        let mut task = match rng.gen_range(0..3) {
            2 if !sets.is_empty() => json!({"name": name, "payload": pick(rng, &singles), "kind": {"select": pick(rng, &sets)}}),
            k => {
                let on = if rng.gen_bool(0.5) { pick(rng, &seqs).clone() } else { pick(rng, &singles).clone() };
                let kind = if k == 0 { "multiclass" } else { "bitvector" };
                json!({"name": name, "payload": on, "kind": {kind: label_names(rng, "l")}})
            }
        };
        if rng.gen_bool(0.3) {
            task["loss_weight"] = json!(*pick(rng, &[0.0, 0.5, 1.0, 2.0]));
        }
        tasks.push(task);
    }
    let mut slices = Vec::new();
    for s in 0..rng.gen_range(0..3) {
        let mut slice = json!({"tag": format!("slice{s}")});
        if rng.gen_bool(0.5) {
            slice["tasks"] = json!([format!("T{}", rng.gen_range(0..tasks.len()))]);
        }
        slices.push(slice);
    }
    let keys = ["encoder", "embed_dim", "hidden_dim", "learning_rate", "epochs", "batch_size"];
    let mut space = serde_json::Map::new();
    let mut pinned = serde_json::Map::new();
    for key in keys {
        match rng.gen_range(0..3) {
            0 => {
                let vals: Vec<Value> = (0..rng.gen_range(1..4)).map(|_| random_param(rng, key)).collect();
                space.insert(key.into(), Value::Array(vals));
            }
            1 => {
                pinned.insert(key.into(), random_param(rng, key));
            }
            _ => {}
        }
    }
    let mut doc = json!({"payloads": payloads, "tasks": tasks});
    if !slices.is_empty() {
        doc["slices"] = Value::Array(slices);
    }
    if rng.gen_bool(0.8) {
        doc["tuning"] = json!({"search_space": space, "pinned": pinned, "budget": rng.gen_range(1..6), "seed": rng.gen::<u64>()});
    }
    serde_json::to_string_pretty(&doc).expect("json")
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let words = ["a", "b", "ça", "x y", "\"q\"", "tab\t", "日本", "", "w1", "w2"];
    pick(rng, &words).to_string()
}

/// Random records valid for `schema`: every field, vote granularity, null,
/// abstention and tag form shows up.
pub fn random_records(schema: &Schema, n: usize, rng: &mut ChaCha8Rng) -> Vec<Value> {
    use crate::schema::{PayloadKind, TaskKind};
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(1..6usize);
        let mut rec = serde_json::Map::new();
        // set elements first: select votes need them
        let mut elements: std::collections::BTreeMap<String, Vec<String>> = Default::default();
        for p in &schema.payloads {
            for f in p.field_inputs() {
                let v = match p.kind {
                    PayloadKind::Singleton => {
                        if rng.gen_bool(0.1) {
                            Value::Null
                        } else {
                            json!(random_word(rng))
                        }
                    }
                    PayloadKind::Sequence => json!((0..len).map(|_| random_word(rng)).collect::<Vec<_>>()),
                    PayloadKind::Set => {
                        let spans = schema.span_ref(p).is_some();
                        let k = rng.gen_range(0..4);
                        let ids: Vec<String> = (0..k).map(|j| format!("e{j}")).collect();
                        let els: Vec<Value> = ids
                            .iter()
                            .map(|id| {
                                if spans && rng.gen_bool(0.8) {
                                    let s = rng.gen_range(0..len);
                                    json!({"id": id, "span": [s, rng.gen_range(s + 1..=len)]})
                                } else {
                                    json!({"id": id})
                                }
                            })
                            .collect();
                        elements.insert(p.name.clone(), ids);
                        Value::Array(els)
                    }
                };
                rec.insert(f.to_string(), v);
            }
        }
        let mut sup = serde_json::Map::new();
        for t in &schema.tasks {
            if rng.gen_bool(0.3) {
                continue;
            }
            let per_token = schema.payload(&t.payload).map(|p| p.kind) == Some(PayloadKind::Sequence);
            let mut votes = Vec::new();
            for s in 0..rng.gen_range(1..4) {
                let one = |rng: &mut ChaCha8Rng| -> Option<Value> {
                    match &t.kind {
                        TaskKind::Multiclass(l) => Some(json!(pick(rng, l))),
                        TaskKind::Bitvector(b) => Some(json!(b.iter().filter(|_| rng.gen_bool(0.4)).collect::<Vec<_>>())),
                        TaskKind::Select(set) => {
                            let ids = elements.get(set).filter(|ids| !ids.is_empty())?;
                            Some(if rng.gen_bool(0.5) { json!(pick(rng, ids)) } else { json!(rng.gen_range(0..ids.len())) })
                        }
                    }
                };
                let value = if per_token && !matches!(t.kind, TaskKind::Select(_)) {
                    Value::Array((0..len).map(|_| if rng.gen_bool(0.2) { Value::Null } else { one(rng).unwrap() }).collect())
                } else {
                    match one(rng) {
                        Some(v) => v,
                        None => continue,
                    }
                };
                votes.push(json!({"source": format!("src{s}"), "value": value}));
            }
            if !votes.is_empty() {
                sup.insert(t.name.clone(), Value::Array(votes));
            }
        }
        if !sup.is_empty() {
            rec.insert("supervision".into(), Value::Object(sup));
        }
        let mut tags = Vec::new();
        if rng.gen_bool(0.7) {
            tags.push(json!(pick(rng, &crate::schema::SPLIT_TAGS)));
        }
        for s in &schema.slices {
            if rng.gen_bool(0.3) {
                tags.push(json!(s.tag));
            }
        }
        if rng.gen_bool(0.2) {
            tags.push(json!("misc"));
        }
        if rng.gen_bool(0.8) {
            rec.insert("tags".into(), Value::Array(tags));
        }
        out.push(Value::Object(rec));
    }
    out
}

/// A random report with CSV-hostile tag names.
pub fn random_report(rng: &mut ChaCha8Rng) -> crate::monitor::Report {
    use crate::monitor::{ReportRow, RowStatus};
    let tags = ["train", "dev", "test", "a,b", "quote\"d", "new\nline", "ünï", " sp "];
    let rows = (0..rng.gen_range(0..12))
        .map(|_| {
            let n = rng.gen_range(0..1000);
            let mut m = [0.0; 4];
            if n > 0 {
                m.iter_mut().for_each(|v| *v = rng.gen::<f64>());
            }
            ReportRow {
                tag: pick(rng, &tags).to_string(),
                task: format!("T{}", rng.gen_range(0..3)),
                n,
                accuracy: m[0],
                precision: m[1],
                recall: m[2],
                f1: m[3],
                is_slice: rng.gen_bool(0.3),
                status: if n == 0 { RowStatus::NoGoldLabels } else { RowStatus::Ok },
                confusion: None,
                per_bit: None,
            }
        })
        .collect();
    crate::monitor::Report { rows, warnings: vec![] }
}
