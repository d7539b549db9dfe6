//! Property round-trips: tensor sets, query text, documents and blobs.
//!
//! Each suite returns the number of cases it ran.

#![allow(dead_code)]

use std::cell::RefCell;

use forge_core::compute::Tensor;
use forge_core::modelstore::fgts;
use forge_core::store::{
    Codec, Document, Store, StoreOptions, TagMap, TagValue, MAX_CHUNK, MIN_CHUNK,
};
use forge_core::tagquery::{parse, CmpOp, Predicate, TagQuery, Test};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use tempfile::TempDir;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

// ---- tensor sets --------------------------------------------------------

fn tensor() -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        // Raw bit patterns, so NaN payloads and signed zeros are covered.
        prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
            .prop_map(move |data| Tensor::new(dims.clone(), data).unwrap())
    })
}

fn tensor_set() -> impl Strategy<Value = Vec<(String, Tensor<f32>)>> {
    prop::collection::vec(("\\PC{0,12}", tensor()), 0..5)
}

pub fn tensor_sets_round_trip_bit_exact() -> u32 {
    runner(4000)
        .run(&tensor_set(), |set| {
            let bytes = fgts::encode(&set).unwrap();
            let back = fgts::decode(&bytes).unwrap();
            prop_assert_eq!(back.len(), set.len());
            for ((n0, t0), (n1, t1)) in set.iter().zip(&back) {
                prop_assert_eq!(n0, n1);
                prop_assert_eq!(t0.dims(), t1.dims());
                prop_assert!(t1.bit_eq(t0));
            }
            prop_assert_eq!(fgts::encode(&back).unwrap(), bytes);
            Ok(())
        })
        .unwrap();
    4000
}

pub fn truncated_tensor_sets_are_rejected() -> u32 {
    runner(500)
        .run(&(tensor_set(), any::<prop::sample::Index>()), |(set, cut)| {
            let bytes = fgts::encode(&set).unwrap();
            let cut = cut.index(bytes.len());
            prop_assert!(fgts::decode(&bytes[..cut]).is_err());
            Ok(())
        })
        .unwrap();
    500
}

// ---- query text ---------------------------------------------------------

fn ident() -> impl Strategy<Value = String> {
    "[A-Za-z_][A-Za-z0-9_.:/-]{0,10}"
}

fn literal_of(variant: u8) -> BoxedStrategy<TagValue> {
    match variant {
        0 => any::<String>().prop_map(TagValue::Str).boxed(),
        1 => any::<i64>().prop_map(TagValue::Int).boxed(),
        2 => prop_oneof![
            any::<f64>().prop_filter("finite", |f| f.is_finite()),
            -1e3f64..1e3,
            Just(0.0),
            Just(-0.0),
            Just(1e-300),
            Just(f64::MAX),
        ]
        .prop_map(TagValue::Float)
        .boxed(),
        _ => any::<bool>().prop_map(TagValue::Bool).boxed(),
    }
}

fn predicate() -> impl Strategy<Value = Predicate> {
    (ident(), 0u8..4, any::<bool>()).prop_flat_map(|(tag, variant, is_in)| {
        if is_in {
            prop::collection::vec(literal_of(variant), 1..4)
                .prop_map(move |vs| Predicate::is_in(tag.clone(), vs))
                .boxed()
        } else {
            let op = prop_oneof![
                Just(CmpOp::Eq),
                Just(CmpOp::Ne),
                Just(CmpOp::Lt),
                Just(CmpOp::Le),
                Just(CmpOp::Gt),
                Just(CmpOp::Ge),
            ];
            (op, literal_of(variant))
                .prop_map(move |(op, v)| Predicate::cmp(tag.clone(), op, v))
                .boxed()
        }
    })
}

fn query() -> impl Strategy<Value = TagQuery> {
    prop::collection::vec(predicate(), 0..5).prop_map(|ps| TagQuery::new(ps).unwrap())
}

/// `PartialEq` on floats treats `0.0 == -0.0`; compare bits instead.
fn same_query(a: &TagQuery, b: &TagQuery) -> bool {
    fn same(a: &TagValue, b: &TagValue) -> bool {
        match (a, b) {
            (TagValue::Float(x), TagValue::Float(y)) => x.to_bits() == y.to_bits(),
            _ => a == b,
        }
    }
    a.predicates.len() == b.predicates.len()
        && a.predicates.iter().zip(&b.predicates).all(|(p, q)| {
            p.tag == q.tag
                && match (&p.test, &q.test) {
                    (Test::Cmp(o1, v1), Test::Cmp(o2, v2)) => o1 == o2 && same(v1, v2),
                    (Test::In(s1), Test::In(s2)) => {
                        s1.len() == s2.len() && s1.iter().zip(s2).all(|(x, y)| same(x, y))
                    }
                    _ => false,
                }
        })
}

pub fn queries_round_trip_through_text() -> u32 {
    runner(4000)
        .run(&query(), |q| {
            let text = q.render();
            let back = parse(&text).map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;
            prop_assert!(same_query(&q, &back), "{} reparsed as {:?}", text, back);
            prop_assert_eq!(back.render(), text);
            Ok(())
        })
        .unwrap();
    4000
}

pub fn parser_never_panics_on_noise() -> u32 {
    runner(1000)
        .run(&"\\PC{0,40}", |s| {
            if let Ok(q) = parse(&s) {
                // Whatever parses must render to something that parses the same.
                let again = parse(&q.render()).unwrap();
                prop_assert!(same_query(&q, &again));
            }
            Ok(())
        })
        .unwrap();
    1000
}

// ---- documents ----------------------------------------------------------

fn tag_value() -> impl Strategy<Value = TagValue> {
    prop_oneof![
        "\\PC{0,16}".prop_map(TagValue::Str),
        any::<i64>().prop_map(TagValue::Int),
        (-1e9f64..1e9).prop_map(TagValue::Float),
        any::<bool>().prop_map(TagValue::Bool),
    ]
}

fn document() -> impl Strategy<Value = Document> {
    (
        "[a-z0-9/._-]{1,24}",
        prop::collection::vec(any::<u8>(), 0..256),
        prop::option::of("\\PC{0,8}"),
        prop::collection::btree_map("[!-~]{1,10}", tag_value(), 0..6),
    )
        .prop_filter("reserved prefix", |(k, ..)| !k.starts_with("__sys/"))
        .prop_map(|(key, data, label, tags)| Document {
            label,
            tags: tags.into_iter().collect::<TagMap>(),
            ..Document::inline(key, data)
        })
}

fn open(dir: &TempDir) -> Store {
    Store::open(
        dir.path(),
        StoreOptions {
            sync: false,
            ..StoreOptions::default()
        },
    )
    .unwrap()
}

pub fn documents_round_trip_through_store_and_reopen() -> u32 {
    runner(1500)
        .run(&prop::collection::vec(document(), 1..6), |docs| {
            let dir = TempDir::new().unwrap();
            let mut expected = std::collections::BTreeMap::new();
            {
                let store = open(&dir);
                for d in docs {
                    // Duplicate keys are rejected, never overwritten.
                    let dup = expected.contains_key(&d.key);
                    let r = store.put_document(d.clone());
                    prop_assert_eq!(r.is_err(), dup);
                    if !dup {
                        prop_assert_eq!(&store.get_document(&d.key).unwrap(), &d);
                        expected.insert(d.key.clone(), d);
                    }
                }
                let json = serde_json::to_string(expected.values().next().unwrap()).unwrap();
                let back: Document = serde_json::from_str(&json).unwrap();
                prop_assert_eq!(&back, expected.values().next().unwrap());
            }
            let store = open(&dir);
            prop_assert_eq!(store.document_count(), expected.len());
            for (k, d) in &expected {
                prop_assert_eq!(&store.get_document(k).unwrap(), d);
            }
            let first = expected.keys().next().unwrap().clone();
            store.delete_document(&first).unwrap();
            drop(store);
            let store = open(&dir);
            prop_assert!(!store.contains_document(&first));
            prop_assert_eq!(store.document_count(), expected.len() - 1);
            Ok(())
        })
        .unwrap();
    1500
}

// ---- blobs --------------------------------------------------------------

const MIB: usize = 1 << 20;

fn blob_case() -> impl Strategy<Value = (Vec<u8>, u32, Codec)> {
    let size = prop_oneof![
        8 => 0usize..64 * 1024,
        3 => 0usize..MIB,
        1 => 0usize..=16 * MIB,
    ];
    let chunk = prop_oneof![
        Just(MIN_CHUNK),
        Just(MAX_CHUNK),
        MIN_CHUNK..=MAX_CHUNK,
    ];
    let codec = prop_oneof![Just(Codec::None), Just(Codec::Deflate)];
    (size, any::<u64>(), any::<bool>(), chunk, codec).prop_map(|(n, seed, compressible, c, k)| {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_xorshift::XorShiftRng::seed_from_u64(seed);
        let data = if compressible {
            (0..n).map(|i| (i / 97) as u8 ^ (rng.random::<u8>() & 1)).collect()
        } else {
            let mut v = vec![0u8; n];
            rng.fill(&mut v[..]);
            v
        };
        (data, c, k)
    })
}

pub fn blobs_round_trip_through_store_and_reopen() -> u32 {
    let dir = TempDir::new().unwrap();
    let store = open(&dir);
    let written = RefCell::new(Vec::new());
    runner(300)
        .run(&blob_case(), |(data, chunk, codec)| {
            let s = &store;
            let mut written = written.borrow_mut();
            let ptr = s.put_blob(&data, chunk, codec.id()).unwrap();
            prop_assert_eq!(ptr.total_size, data.len() as u64);
            prop_assert_eq!(ptr.chunk_count as u64, (data.len() as u64).div_ceil(chunk as u64));
            prop_assert!(s.get_blob(&ptr).unwrap() == data);
            // Keep a few pointers alive across a reopen.
            if written.len() < 8 && data.len() < MIB {
                s.put_document(Document::blob(format!("b{}", written.len()), ptr.clone()))
                    .unwrap();
                written.push((ptr, data));
            }
            Ok(())
        })
        .unwrap();
    drop(store);
    let fresh = open(&dir);
    for (i, (ptr, data)) in written.into_inner().iter().enumerate() {
        assert_eq!(fresh.get_document(&format!("b{i}")).unwrap().blob_id(), Some(ptr.blob_id.as_str()));
        assert!(fresh.get_blob(ptr).unwrap() == *data);
    }
    300
}

/// Every suite in turn; the total number of cases, all passing.
pub fn run() -> u32 {
    SUITES.iter().map(|(_, f)| f()).sum()
}

pub const SUITES: &[(&str, fn() -> u32)] = &[
    ("tensor_sets_round_trip_bit_exact", tensor_sets_round_trip_bit_exact),
    ("truncated_tensor_sets_are_rejected", truncated_tensor_sets_are_rejected),
    ("queries_round_trip_through_text", queries_round_trip_through_text),
    ("parser_never_panics_on_noise", parser_never_panics_on_noise),
    ("documents_round_trip_through_store_and_reopen", documents_round_trip_through_store_and_reopen),
    ("blobs_round_trip_through_store_and_reopen", blobs_round_trip_through_store_and_reopen),
];
