//! End-to-end pipeline behavior through the in-process surfaces: register,
//! subscribe, publish, and observe delivered frames on gateway channels.

use std::collections::BTreeSet;
use std::time::Duration;

use broker::{
    Broker, BrokerConfig, BrokerError, CompareOp, Constraint, ContentCandidateMode, DeliveryFrame,
    MatchInfo, PropertyList, Scalar, StoreConfig, SubscriberId,
};
use tokio::sync::mpsc::UnboundedReceiver;

const POPULATION_LOOKUP: &str = "let populations = {\"new zealand\": 4693000, \"germany\": 8267000}; \
     let places = find_keys(publication, populations); \
     lookup(populations, places[0], 0) > 4000000";

fn relaxed_config() -> BrokerConfig {
    BrokerConfig {
        store: StoreConfig { lookups_per_second: 1_000_000, ..StoreConfig::default() },
        ..BrokerConfig::default()
    }
}

fn props(entries: &[(&str, Scalar)]) -> PropertyList {
    PropertyList::new(entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()).unwrap()
}

async fn connected_subscriber(broker: &Broker) -> (SubscriberId, UnboundedReceiver<DeliveryFrame>) {
    let id = broker.register_subscriber().await.unwrap();
    broker.gateway().register_device(&id).unwrap();
    let rx = broker.gateway().connect(&id).unwrap();
    (id, rx)
}

fn drain(rx: &mut UnboundedReceiver<DeliveryFrame>) -> Vec<DeliveryFrame> {
    let mut frames = Vec::new();
    while let Ok(frame) = rx.try_recv() {
        frames.push(frame);
    }
    frames
}

fn topics(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

#[tokio::test(start_paused = true)]
async fn broker_registers_the_full_action_set() {
    let broker = Broker::new(relaxed_config()).unwrap();
    assert_eq!(broker.runtime().registered_action_count(), 12);
}

#[tokio::test(start_paused = true)]
async fn zero_cache_ttl_is_rejected() {
    let mut config = relaxed_config();
    config.pipeline.cache_ttl = Duration::ZERO;
    assert!(matches!(Broker::new(config), Err(BrokerError::InvalidRequest(_))));
}

#[tokio::test(start_paused = true)]
async fn frame_timestamps_never_decrease_per_emitting_container() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (id, mut rx) = connected_subscriber(&broker).await;
    broker.subscribe_topics(&id, &topics(&["a"])).await.unwrap();

    // Sequential publishes reuse one warm deliver container.
    for i in 0..20 {
        broker.publish_topic(&format!("p{i}"), &topics(&["a"])).await.unwrap();
    }
    let frames = drain(&mut rx);
    assert_eq!(frames.len(), 20);
    for pair in frames.windows(2) {
        assert!(pair[1].timestamp >= pair[0].timestamp);
    }
}

#[tokio::test(start_paused = true)]
async fn registration_mints_distinct_persisted_ids() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let a = broker.register_subscriber().await.unwrap();
    let b = broker.register_subscriber().await.unwrap();
    assert_ne!(a, b);
    assert!(broker.store().get_doc(&format!("subscribers/{a}")).await.is_ok());
}

#[tokio::test(start_paused = true)]
async fn hundreds_of_registrations_cost_one_write_each() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let before = broker.store().stats().puts;
    let mut seen = BTreeSet::new();
    for _ in 0..352 {
        seen.insert(broker.register_subscriber().await.unwrap());
    }
    assert_eq!(seen.len(), 352);
    assert_eq!(broker.store().stats().puts - before, 352);
}

#[tokio::test(start_paused = true)]
async fn topic_publish_reaches_topic_subscriber() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (id, mut rx) = connected_subscriber(&broker).await;
    broker.subscribe_topics(&id, &topics(&["a"])).await.unwrap();

    let receipt = broker.publish_topic("hello", &topics(&["a"])).await.unwrap();
    let frames = drain(&mut rx);
    assert_eq!(frames.len(), 1);
    assert_eq!(frames[0].data, "hello");
    assert_eq!(frames[0].match_info, MatchInfo::Topic("a".into()));
    assert_eq!(receipt.throttled(), 0);
}

#[tokio::test(start_paused = true)]
async fn both_topic_subscribers_receive_one_frame_each() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (s1, mut rx1) = connected_subscriber(&broker).await;
    let (s2, mut rx2) = connected_subscriber(&broker).await;
    broker.subscribe_topics(&s1, &topics(&["a"])).await.unwrap();
    broker.subscribe_topics(&s2, &topics(&["a"])).await.unwrap();

    broker.publish_topic("d", &topics(&["a"])).await.unwrap();
    for rx in [&mut rx1, &mut rx2] {
        let frames = drain(rx);
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].match_info, MatchInfo::Topic("a".into()));
    }
}

#[tokio::test(start_paused = true)]
async fn per_topic_fanout_duplicates_with_distinct_match_info() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (id, mut rx) = connected_subscriber(&broker).await;
    broker.subscribe_topics(&id, &topics(&["a", "b"])).await.unwrap();

    broker.publish_topic("d", &topics(&["a", "b"])).await.unwrap();
    let frames = drain(&mut rx);
    assert_eq!(frames.len(), 2);
    let infos: BTreeSet<String> = frames
        .iter()
        .map(|f| match &f.match_info {
            MatchInfo::Topic(t) => t.clone(),
            other => panic!("unexpected match info {other:?}"),
        })
        .collect();
    assert_eq!(infos, BTreeSet::from(["a".to_string(), "b".to_string()]));
}

#[tokio::test(start_paused = true)]
async fn topic_dedupe_collapses_to_a_single_frame() {
    let mut config = relaxed_config();
    config.pipeline.topic_dedupe = true;
    let broker = Broker::new(config).unwrap();
    let (id, mut rx) = connected_subscriber(&broker).await;
    broker.subscribe_topics(&id, &topics(&["a", "b"])).await.unwrap();

    broker.publish_topic("d", &topics(&["a", "b"])).await.unwrap();
    assert_eq!(drain(&mut rx).len(), 1);

    // Dedupe is scoped per publication: the next publish delivers again.
    broker.publish_topic("d2", &topics(&["a", "b"])).await.unwrap();
    assert_eq!(drain(&mut rx).len(), 1);
}

#[tokio::test(start_paused = true)]
async fn warm_container_skips_store_lookups_inside_ttl() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (id, mut rx) = connected_subscriber(&broker).await;
    broker.subscribe_topics(&id, &topics(&["a"])).await.unwrap();

    broker.publish_topic("one", &topics(&["a"])).await.unwrap();
    broker.publish_topic("two", &topics(&["a"])).await.unwrap();
    assert_eq!(drain(&mut rx).len(), 2);
    // Second resolve hit the container cache.
    assert_eq!(broker.store().reads_for("topic/a"), 1);
}

#[tokio::test(start_paused = true)]
async fn unsubscribe_takes_effect_after_cache_ttl() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (id, mut rx) = connected_subscriber(&broker).await;
    broker.subscribe_topics(&id, &topics(&["a"])).await.unwrap();

    broker.publish_topic("p1", &topics(&["a"])).await.unwrap();
    assert_eq!(drain(&mut rx).len(), 1);

    broker.unsubscribe_topics(&id, &topics(&["a"])).await.unwrap();

    // Within the staleness window delivery is still allowed (warm cache).
    broker.publish_topic("p2", &topics(&["a"])).await.unwrap();
    assert_eq!(drain(&mut rx).len(), 1);

    // Past TTL + epsilon the stale entry must not be used.
    tokio::time::sleep(Duration::from_millis(10_100)).await;
    broker.publish_topic("p3", &topics(&["a"])).await.unwrap();
    assert!(drain(&mut rx).is_empty());
}

#[tokio::test(start_paused = true)]
async fn content_conjunction_delivers_with_property_match_info() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (id, mut rx) = connected_subscriber(&broker).await;
    broker
        .subscribe_content(
            &id,
            &[
                Constraint::new("k1", CompareOp::Eq, 5.0),
                Constraint::new("k2", CompareOp::Ge, 10.0),
            ],
        )
        .await
        .unwrap();

    let properties = props(&[("k1", Scalar::Num(5.0)), ("k2", Scalar::Num(12.0))]);
    broker.publish_content("d", &properties).await.unwrap();

    let frames = drain(&mut rx);
    assert_eq!(frames.len(), 1);
    assert_eq!(frames[0].match_info, MatchInfo::Properties(properties));

    // Non-matching properties do not deliver.
    broker
        .publish_content("d", &props(&[("k1", Scalar::Num(5.0)), ("k2", Scalar::Num(9.0))]))
        .await
        .unwrap();
    assert!(drain(&mut rx).is_empty());
}

#[tokio::test(start_paused = true)]
async fn first_key_mode_misses_subscription_not_on_first_key() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (id, mut rx) = connected_subscriber(&broker).await;
    // Satisfiable subscription, but keyed only on k2 while the publication's
    // alphabetically-first key is k1.
    broker
        .subscribe_content(&id, &[Constraint::new("k2", CompareOp::Ge, 1.0)])
        .await
        .unwrap();

    broker
        .publish_content("d", &props(&[("k1", Scalar::Num(1.0)), ("k2", Scalar::Num(5.0))]))
        .await
        .unwrap();
    assert!(drain(&mut rx).is_empty());
}

#[tokio::test(start_paused = true)]
async fn all_keys_mode_finds_the_same_subscription_once() {
    let mut config = relaxed_config();
    config.pipeline.content_candidate_mode = ContentCandidateMode::AllKeys;
    let broker = Broker::new(config).unwrap();
    let (id, mut rx) = connected_subscriber(&broker).await;
    broker
        .subscribe_content(&id, &[Constraint::new("k2", CompareOp::Ge, 1.0)])
        .await
        .unwrap();
    let (multi, mut multi_rx) = connected_subscriber(&broker).await;
    broker
        .subscribe_content(
            &multi,
            &[
                Constraint::new("k1", CompareOp::Ge, 0.0),
                Constraint::new("k2", CompareOp::Ge, 0.0),
            ],
        )
        .await
        .unwrap();

    broker
        .publish_content("d", &props(&[("k1", Scalar::Num(1.0)), ("k2", Scalar::Num(5.0))]))
        .await
        .unwrap();
    assert_eq!(drain(&mut rx).len(), 1);
    // Candidate under both keys, still exactly one frame.
    assert_eq!(drain(&mut multi_rx).len(), 1);
}

#[tokio::test(start_paused = true)]
async fn content_overwrite_switches_active_subscription() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (id, mut rx) = connected_subscriber(&broker).await;
    broker
        .subscribe_content(&id, &[Constraint::new("k1", CompareOp::Gt, 5.0)])
        .await
        .unwrap();
    broker
        .subscribe_content(&id, &[Constraint::new("k1", CompareOp::Gt, 7.0)])
        .await
        .unwrap();

    broker.publish_content("six", &props(&[("k1", Scalar::Num(6.0))])).await.unwrap();
    assert!(drain(&mut rx).is_empty());
    broker.publish_content("eight", &props(&[("k1", Scalar::Num(8.0))])).await.unwrap();
    assert_eq!(drain(&mut rx).len(), 1);
}

#[tokio::test(start_paused = true)]
async fn unsubscribe_content_without_subscription_is_ok() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (id, _rx) = connected_subscriber(&broker).await;
    broker.unsubscribe_content(&id).await.unwrap();
}

#[tokio::test(start_paused = true)]
async fn constraints_stored_sorted_and_candidates_resolved_under_first_key() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (id, mut rx) = connected_subscriber(&broker).await;
    broker
        .subscribe_content(
            &id,
            &[
                Constraint::new("b", CompareOp::Ge, 0.0),
                Constraint::new("a", CompareOp::Ge, 0.0),
            ],
        )
        .await
        .unwrap();
    let doc = broker.store().get_doc("sub-content/".to_string().as_str()).await;
    assert!(doc.is_err(), "doc id requires the subscriber suffix");
    let doc = broker.store().get_doc(&format!("sub-content/{id}")).await.unwrap();
    let keys: Vec<&str> = doc["constraints"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["key"].as_str().unwrap())
        .collect();
    assert_eq!(keys, vec!["a", "b"]);

    broker
        .publish_content("d", &props(&[("a", Scalar::Num(1.0)), ("b", Scalar::Num(1.0))]))
        .await
        .unwrap();
    assert_eq!(drain(&mut rx).len(), 1);
    // FIRST_KEY candidates came from ckey/a, the publication's first sorted key.
    assert_eq!(broker.store().reads_for("ckey/a"), 1);
    assert_eq!(broker.store().reads_for("ckey/b"), 0);
}

#[tokio::test(start_paused = true)]
async fn type_mismatch_counts_candidate_as_non_matching() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (id, mut rx) = connected_subscriber(&broker).await;
    broker
        .subscribe_content(&id, &[Constraint::new("k1", CompareOp::Gt, 5.0)])
        .await
        .unwrap();

    broker.publish_content("d", &props(&[("k1", "not-a-number".into())])).await.unwrap();
    assert!(drain(&mut rx).is_empty());
    assert_eq!(broker.match_error_count(), 1);
}

#[tokio::test(start_paused = true)]
async fn function_pipeline_delivers_on_true_verdict() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (id, mut rx) = connected_subscriber(&broker).await;
    broker.subscribe_function(&id, "population", POPULATION_LOOKUP).await.unwrap();

    let payload = "DEBS2018 will be held at the University of Waikato in New Zealand.";
    broker.publish_function(payload, "population").await.unwrap();
    let frames = drain(&mut rx);
    assert_eq!(frames.len(), 1);
    assert_eq!(frames[0].data, payload);
    assert_eq!(frames[0].match_info, MatchInfo::FunctionType("population".into()));

    // The population table makes this payload pass the threshold too.
    broker.publish_function("A meeting in Germany.", "population").await.unwrap();
    assert_eq!(drain(&mut rx).len(), 1);

    // Unknown place: the program errors at places[0]; treated as non-match.
    broker.publish_function("Sunny in Paris.", "population").await.unwrap();
    assert!(drain(&mut rx).is_empty());
    assert_eq!(broker.match_error_count(), 1);
}

#[tokio::test(start_paused = true)]
async fn constant_false_function_never_delivers() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (id, mut rx) = connected_subscriber(&broker).await;
    broker.subscribe_function(&id, "never", "false").await.unwrap();
    for i in 0..5 {
        broker.publish_function(&format!("payload {i}"), "never").await.unwrap();
    }
    assert!(drain(&mut rx).is_empty());
}

#[tokio::test(start_paused = true)]
async fn function_parse_error_surfaces_at_subscribe_time_only() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (id, _rx) = connected_subscriber(&broker).await;
    let before = broker.store().snapshot();
    let err = broker.subscribe_function(&id, "T", "publication >").await.unwrap_err();
    match err {
        BrokerError::Parse(detail) => {
            assert!(detail.contains("column 14"), "detail: {detail}");
        }
        other => panic!("unexpected error {other:?}"),
    }
    assert_eq!(broker.store().snapshot(), before);
}

#[tokio::test(start_paused = true)]
async fn function_types_are_independent_and_overwrite_per_type() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (id, mut rx) = connected_subscriber(&broker).await;
    broker.subscribe_function(&id, "T1", "true").await.unwrap();
    broker.subscribe_function(&id, "T2", "contains(publication, \"x\")").await.unwrap();

    broker.publish_function("x marks the spot", "T1").await.unwrap();
    broker.publish_function("x marks the spot", "T2").await.unwrap();
    assert_eq!(drain(&mut rx).len(), 2);

    // Resubmitting T1 overwrites the previous T1 program.
    broker.subscribe_function(&id, "T1", "false").await.unwrap();
    tokio::time::sleep(Duration::from_millis(10_100)).await;
    broker.publish_function("x", "T1").await.unwrap();
    assert!(drain(&mut rx).is_empty());
}

#[tokio::test(start_paused = true)]
async fn subscribing_unknown_subscriber_fails() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let ghost = SubscriberId::new("ghost").unwrap();
    assert!(matches!(
        broker.subscribe_topics(&ghost, &topics(&["a"])).await,
        Err(BrokerError::UnknownSubscriber(_))
    ));
}

#[tokio::test(start_paused = true)]
async fn publish_validation_rejects_empty_attachments() {
    let broker = Broker::new(relaxed_config()).unwrap();
    assert!(matches!(
        broker.publish_topic("d", &[]).await,
        Err(BrokerError::InvalidRequest(_))
    ));
    assert!(matches!(
        broker.publish_function("d", "").await,
        Err(BrokerError::InvalidRequest(_))
    ));
}

/// Publish-side handlers read broker state only through budgeted lookups
/// and their container caches: no gets, no puts.
#[tokio::test(start_paused = true)]
async fn publish_pipelines_touch_no_store_state_besides_lookups() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (id, mut rx) = connected_subscriber(&broker).await;
    broker.subscribe_topics(&id, &topics(&["a"])).await.unwrap();
    broker
        .subscribe_content(&id, &[Constraint::new("k", CompareOp::Ge, 0.0)])
        .await
        .unwrap();
    broker.subscribe_function(&id, "T", "true").await.unwrap();

    let before = broker.store().stats();
    broker.publish_topic("d", &topics(&["a"])).await.unwrap();
    broker.publish_content("d", &props(&[("k", Scalar::Num(1.0))])).await.unwrap();
    broker.publish_function("d", "T").await.unwrap();
    let after = broker.store().stats();

    assert_eq!(drain(&mut rx).len(), 3);
    assert_eq!(after.puts, before.puts, "publishing must not write");
    assert_eq!(after.gets, before.gets, "publishing must not get documents");
    assert_eq!(after.deletes, before.deletes);
    assert_eq!(after.lookups - before.lookups, 3, "one budgeted lookup per cold key");
}

#[tokio::test(start_paused = true)]
async fn receipts_enumerate_every_stage() {
    let broker = Broker::new(relaxed_config()).unwrap();
    let (s1, _rx1) = connected_subscriber(&broker).await;
    let (s2, _rx2) = connected_subscriber(&broker).await;
    broker.subscribe_topics(&s1, &topics(&["a"])).await.unwrap();
    broker.subscribe_topics(&s2, &topics(&["a"])).await.unwrap();

    let receipt = broker.publish_topic("d", &topics(&["a"])).await.unwrap();
    assert!(!receipt.publication_id.is_empty());
    let stages: Vec<&str> = receipt.branches.iter().map(|b| b.stage.as_str()).collect();
    assert_eq!(
        stages,
        vec!["topic-split", "topic-match", "topic-deliver", "topic-deliver"]
    );
    assert!(receipt.branches.iter().all(|b| b.status == "ok"));
    let mut invocation_ids: Vec<&str> =
        receipt.branches.iter().map(|b| b.invocation_id.as_str()).collect();
    invocation_ids.dedup();
    assert_eq!(invocation_ids.len(), 4, "invocation ids are distinct");
}

/// Randomized cross-check of the topic pipeline against the pure
/// set-intersection predicate, frame by frame.
#[tokio::test(start_paused = true)]
async fn topic_pipeline_agrees_with_matching_predicate() {
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    let broker = Broker::new(relaxed_config()).unwrap();
    let universe = ["t0", "t1", "t2", "t3"];
    let mut rng = StdRng::seed_from_u64(11);

    let mut subscribers = Vec::new();
    for _ in 0..10 {
        let (id, rx) = connected_subscriber(&broker).await;
        let mut set = BTreeSet::new();
        while set.is_empty() {
            for t in &universe {
                if rng.random_bool(0.4) {
                    set.insert(t.to_string());
                }
            }
        }
        broker
            .subscribe_topics(&id, &set.iter().cloned().collect::<Vec<_>>())
            .await
            .unwrap();
        subscribers.push((id, set, rx));
    }

    for round in 0..20 {
        let mut publication = Vec::new();
        while publication.is_empty() {
            for t in &universe {
                if rng.random_bool(0.5) {
                    publication.push(t.to_string());
                }
            }
        }
        let data = format!("pub-{round}");
        broker.publish_topic(&data, &publication).await.unwrap();

        for (id, set, rx) in subscribers.iter_mut() {
            let got: Vec<String> = drain(rx)
                .into_iter()
                .map(|f| {
                    assert_eq!(f.data, data);
                    assert_eq!(&f.subscriber_id, id);
                    match f.match_info {
                        MatchInfo::Topic(t) => t,
                        other => panic!("unexpected match info {other:?}"),
                    }
                })
                .collect();
            let mut want = broker::topic_matches(set, &publication);
            let mut got_sorted = got;
            got_sorted.sort();
            want.sort();
            assert_eq!(got_sorted, want, "subscriber {id} round {round}");
        }
        // Keep every resolve fresh so subscription state is authoritative.
        tokio::time::sleep(Duration::from_millis(10_100)).await;
    }
}
