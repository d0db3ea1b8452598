use std::collections::BTreeSet;

use chrono::NaiveDate;
use proptest::prelude::*;

use sciqa_core::corpus::ShardKey;
use sciqa_core::index::HashingEmbedder;
use sciqa_core::retrieval::{bm25_retrieve, hybrid_retrieve, select_shards, RouteConstraints, TimeRange};
use sciqa_core::testkit::{self, oracle};

const DOMAINS: &[&str] = &["cs", "cs.LG", "cs.CL", "stat", "stat.ML", "math", "q-bio"];

fn arb_constraints() -> impl Strategy<Value = RouteConstraints> {
    let range = prop::option::of((0i64..900, 0i64..400).prop_map(|(offset, len)| {
        let start = NaiveDate::from_ymd_opt(2023, 1, 1).unwrap() + chrono::Duration::days(offset);
        TimeRange { start, end: start + chrono::Duration::days(len) }
    }));
    let domains = prop::option::of(prop::collection::btree_set(prop::sample::select(DOMAINS), 1..3));
    (range, domains).prop_map(|(time_range, domains)| {
        RouteConstraints {
            time_range,
            domains: domains.map(|d| d.into_iter().map(String::from).collect()),
        }
        .normalized()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn constrained_queries_open_only_matching_shards(c in arb_constraints()) {
        let catalog = testkit::fixture_catalog();
        let allowed = oracle::allowed_shards(&catalog.keys(), &c);
        let selected: BTreeSet<ShardKey> = select_shards(&catalog, &c).into_iter().collect();
        prop_assert_eq!(&selected, &allowed);

        catalog.clear_access_log();
        let emb = HashingEmbedder::default();
        let h = hybrid_retrieve(&catalog, &emb, "proximal policy optimization", &c, 30);
        let b = bm25_retrieve(&catalog, "proximal policy optimization", &c, 80);
        for key in catalog.access_log() {
            prop_assert!(allowed.contains(&key), "opened {key:?}");
        }
        prop_assert!(h.results.len() <= 30 * selected.len());
        prop_assert!(b.results.len() <= 80);
        for r in h.results.iter().chain(&b.results) {
            prop_assert!(allowed.contains(r.shard_key.as_ref().unwrap()));
        }
    }

    #[test]
    fn constrained_results_are_subset_of_unconstrained(c in arb_constraints()) {
        let catalog = testkit::fixture_catalog();
        let emb = HashingEmbedder::default();
        let q = "policy gradient language model bayesian";
        let ids = |o: sciqa_core::retrieval::RetrievalOutcome| o.results.iter().map(|r| r.id().to_string()).collect::<BTreeSet<_>>();
        let all = RouteConstraints::default();
        prop_assert!(ids(hybrid_retrieve(&catalog, &emb, q, &c, 30)).is_subset(&ids(hybrid_retrieve(&catalog, &emb, q, &all, 30))));
        // with a budget larger than the corpus the global cap never truncates
        prop_assert!(ids(bm25_retrieve(&catalog, q, &c, 10_000)).is_subset(&ids(bm25_retrieve(&catalog, q, &all, 10_000))));
    }
}

#[test]
fn period_oracle_examples() {
    let d = |y, m, d| NaiveDate::from_ymd_opt(y, m, d).unwrap();
    assert_eq!(oracle::period_days("2024-Q1"), (d(2024, 1, 1), d(2024, 3, 31)));
    assert_eq!(oracle::period_days("2023-12"), (d(2023, 12, 1), d(2023, 12, 31)));
}
