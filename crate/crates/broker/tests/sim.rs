use std::collections::BTreeSet;
use std::sync::Arc;

use passion_broker::topic;
use passion_broker::{AllowList, BrokerError, FaultConfig, Granted, QoS, SimConfig, Simulation};
use passion_core::chaincode::{Grant, Right};

fn grant(resource: &str, rights: &[Right]) -> Grant {
    Grant {
        resource: resource.to_string(),
        rights: rights.iter().copied().collect(),
    }
}

fn open_sim(seed: u64, faults: FaultConfig) -> (Simulation, Arc<AllowList>) {
    let auth = Arc::new(AllowList::new());
    let sim = Simulation::new(
        SimConfig {
            seed,
            faults,
            ..SimConfig::default()
        },
        auth.clone(),
    );
    (sim, auth)
}

fn lossy() -> FaultConfig {
    FaultConfig {
        drop: 0.3,
        duplicate: 0.1,
        reorder: 0.1,
    }
}

fn join(sim: &mut Simulation, auth: &AllowList, id: &str, clean: bool) -> usize {
    auth.allow_all(id);
    let c = sim.add_client(id);
    assert!(!sim.connect_and_wait(c, clean, "challenge", b"sig").unwrap());
    c
}

fn payload(i: usize) -> Vec<u8> {
    format!("reading-{i}").into_bytes()
}

#[test]
fn qos0_without_subscribers_is_dropped() {
    let (mut sim, auth) = open_sim(1, FaultConfig::none());
    let p = join(&mut sim, &auth, "pub", true);
    sim.publish(p, "sensors/x", b"v", QoS::AtMostOnce, false).unwrap();
    assert!(sim.run_until_idle(1_000));
    assert_eq!(sim.broker().retained_count(), 0);
}

#[test]
fn qos1_survives_loss() {
    let (mut sim, auth) = open_sim(7, lossy());
    let p = join(&mut sim, &auth, "pub", true);
    let s = join(&mut sim, &auth, "sub", true);
    assert_eq!(
        sim.subscribe_and_wait(s, &[("sensors/#", QoS::AtLeastOnce)]).unwrap(),
        vec![Granted::Qos(QoS::AtLeastOnce)]
    );
    sim.set_faults(p, true);
    sim.set_faults(s, true);
    for i in 0..200 {
        sim.publish_when_ready(p, "sensors/a", &payload(i), QoS::AtLeastOnce, false)
            .unwrap();
    }
    assert!(sim.run_until_idle(600_000));
    let got: BTreeSet<Vec<u8>> = sim.deliveries(s).iter().map(|d| d.payload.clone()).collect();
    for i in 0..200 {
        assert!(got.contains(&payload(i)), "message {i} missing");
    }
    assert!(sim.stats().dropped > 0);
}

#[test]
fn qos2_exactly_once_in_order_under_faults() {
    for seed in [3, 11] {
        let (mut sim, auth) = open_sim(seed, lossy());
        let p = join(&mut sim, &auth, "pub", true);
        let s1 = join(&mut sim, &auth, "sub1", true);
        let s2 = join(&mut sim, &auth, "sub2", true);
        sim.subscribe_and_wait(s1, &[("sensors/+", QoS::ExactlyOnce)]).unwrap();
        sim.subscribe_and_wait(s2, &[("sensors/#", QoS::ExactlyOnce)]).unwrap();
        for c in [p, s1, s2] {
            sim.set_faults(c, true);
        }
        for i in 0..150 {
            sim.publish_when_ready(p, "sensors/a", &payload(i), QoS::ExactlyOnce, false)
                .unwrap();
        }
        assert!(sim.run_until_idle(600_000));
        let expected: Vec<Vec<u8>> = (0..150).map(payload).collect();
        for s in [s1, s2] {
            let got: Vec<Vec<u8>> = sim.deliveries(s).iter().map(|d| d.payload.clone()).collect();
            assert_eq!(got, expected, "seed {seed}");
        }
        assert!(sim.stats().duplicated > 0 && sim.stats().reordered > 0);
    }
}

#[test]
fn effective_qos_is_the_minimum() {
    let (mut sim, auth) = open_sim(2, FaultConfig::none());
    let p = join(&mut sim, &auth, "pub", true);
    let s = join(&mut sim, &auth, "sub", true);
    sim.subscribe_and_wait(s, &[("t", QoS::AtLeastOnce)]).unwrap();
    sim.publish(p, "t", b"x", QoS::ExactlyOnce, false).unwrap();
    sim.publish(p, "t", b"y", QoS::AtMostOnce, false).unwrap();
    assert!(sim.run_until_idle(1_000));
    let qos: Vec<QoS> = sim.deliveries(s).iter().map(|d| d.qos).collect();
    assert_eq!(qos, vec![QoS::AtLeastOnce, QoS::AtMostOnce]);
}

#[test]
fn qos1_redelivered_with_dup_after_reconnect() {
    let (mut sim, auth) = open_sim(5, FaultConfig::none());
    let p = join(&mut sim, &auth, "pub", true);
    let s = join(&mut sim, &auth, "sub", false);
    sim.subscribe_and_wait(s, &[("t", QoS::AtLeastOnce)]).unwrap();
    sim.publish(p, "t", b"once", QoS::AtLeastOnce, false).unwrap();
    sim.run_until(1_000, |sim| !sim.deliveries(s).is_empty());
    // the PUBACK is still on the wire when the connection drops
    sim.drop_connection(s);
    assert_eq!(sim.broker().session("sub").unwrap().inflight_out, 1);
    assert!(sim.connect_and_wait(s, false, "c2", b"sig").unwrap());
    assert!(sim.run_until_idle(5_000));
    let d = sim.deliveries(s);
    assert_eq!(d.len(), 2);
    assert!(!d[0].dup);
    assert!(d[1].dup);
    assert_eq!(d[1].payload, b"once");
}

#[test]
fn retained_message_reaches_late_subscriber() {
    let (mut sim, auth) = open_sim(6, FaultConfig::none());
    let p = join(&mut sim, &auth, "pub", true);
    for v in ["20.1", "20.5", "21.0"] {
        sim.publish(p, "sensors/dev-1/temperature", v.as_bytes(), QoS::AtLeastOnce, true)
            .unwrap();
    }
    sim.publish(p, "sensors/dev-2/temperature", b"9", QoS::AtLeastOnce, true).unwrap();
    sim.publish(p, "sensors/dev-2/temperature", b"", QoS::AtLeastOnce, true).unwrap();
    sim.publish(p, "sensors/dev-3/temperature", b"7", QoS::AtMostOnce, false).unwrap();
    assert!(sim.run_until_idle(1_000));
    assert_eq!(sim.broker().retained_count(), 1);

    let late = join(&mut sim, &auth, "late", true);
    sim.subscribe_and_wait(late, &[("sensors/+/temperature", QoS::ExactlyOnce)]).unwrap();
    assert!(sim.run_until_idle(1_000));
    let d = sim.deliveries(late);
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].payload, b"21.0");
    assert!(d[0].retain);
    assert_eq!(d[0].qos, QoS::AtLeastOnce);
}

#[test]
fn persistent_session_receives_missed_messages_in_order() {
    let (mut sim, auth) = open_sim(8, FaultConfig::none());
    let p = join(&mut sim, &auth, "pub", true);
    let s = join(&mut sim, &auth, "sub", false);
    sim.subscribe_and_wait(s, &[("t", QoS::AtLeastOnce)]).unwrap();
    sim.disconnect(s);
    assert!(sim.run_until_idle(1_000));
    for i in 0..3 {
        sim.publish(p, "t", &payload(i), QoS::AtLeastOnce, false).unwrap();
    }
    sim.publish(p, "t", b"qos0", QoS::AtMostOnce, false).unwrap();
    assert!(sim.run_until_idle(1_000));
    assert_eq!(sim.broker().session("sub").unwrap().offline_queue, 3);

    assert!(sim.connect_and_wait(s, false, "c2", b"sig").unwrap());
    assert!(sim.run_until_idle(1_000));
    let got: Vec<Vec<u8>> = sim.deliveries(s).iter().map(|d| d.payload.clone()).collect();
    assert_eq!(got, (0..3).map(payload).collect::<Vec<_>>());
}

#[test]
fn clean_connect_discards_prior_session() {
    let (mut sim, auth) = open_sim(9, FaultConfig::none());
    let p = join(&mut sim, &auth, "pub", true);
    let s = join(&mut sim, &auth, "sub", false);
    sim.subscribe_and_wait(s, &[("t", QoS::AtLeastOnce)]).unwrap();
    sim.disconnect(s);
    sim.run_until_idle(1_000);
    sim.publish(p, "t", b"missed", QoS::AtLeastOnce, false).unwrap();
    sim.run_until_idle(1_000);
    assert!(!sim.connect_and_wait(s, true, "c2", b"sig").unwrap());
    assert!(sim.run_until_idle(1_000));
    assert!(sim.deliveries(s).is_empty());
    assert!(sim.broker().session("sub").unwrap().subscriptions.is_empty());
    sim.disconnect(s);
    sim.run_until_idle(1_000);
    assert!(sim.broker().session("sub").is_none());
}

#[test]
fn takeover_closes_the_older_connection() {
    let (mut sim, auth) = open_sim(10, FaultConfig::none());
    let first = join(&mut sim, &auth, "dev", false);
    let second = sim.add_client("dev");
    assert!(sim.connect_and_wait(second, false, "c2", b"sig").unwrap());
    sim.run_for(10);
    assert!(!sim.client(first).is_connected());
    assert!(sim.client(second).is_connected());
    assert!(sim.broker().session("dev").unwrap().connected);
}

#[test]
fn session_expiry() {
    let auth = Arc::new(AllowList::new());
    let mut config = SimConfig::default();
    config.broker.session_expiry_ms = Some(5_000);
    let mut sim = Simulation::new(config, auth.clone());
    let s = join(&mut sim, &auth, "sub", false);
    sim.disconnect(s);
    sim.run_until_idle(100);
    let at = sim.now();
    assert!(sim.broker_mut().expire_sessions(at + 4_999).is_empty());
    assert_eq!(sim.broker_mut().expire_sessions(at + 5_000), vec!["sub".to_string()]);
}

#[test]
fn unknown_client_is_refused() {
    let (mut sim, _auth) = open_sim(12, FaultConfig::none());
    let c = sim.add_client("stranger");
    assert!(matches!(
        sim.connect_and_wait(c, true, "c", b"sig"),
        Err(BrokerError::Refused(4))
    ));
    assert!(sim.broker().session("stranger").is_none());
}

#[test]
fn client_window_is_enforced() {
    let (mut sim, auth) = open_sim(13, FaultConfig::none());
    let p = join(&mut sim, &auth, "pub", true);
    for i in 0..32 {
        sim.publish(p, "t", &payload(i), QoS::AtLeastOnce, false).unwrap();
    }
    assert!(matches!(
        sim.publish(p, "t", b"x", QoS::AtLeastOnce, false),
        Err(BrokerError::QuotaExceeded)
    ));
    assert!(sim.run_until_idle(1_000));
    sim.publish(p, "t", b"x", QoS::AtLeastOnce, false).unwrap();
}

// Every topic/filter/grant over a two-letter alphabet: a subscriber only ever
// receives topics its subscribe grant matches, and only topics the publisher
// may publish are routed at all.
#[test]
fn authorization_exhaustive() {
    let words = ["a", "b"];
    let mut topics = Vec::new();
    for x in words {
        topics.push(x.to_string());
        for y in words {
            topics.push(format!("{x}/{y}"));
        }
    }
    let patterns = ["#", "a/#", "a", "a/+", "+/b", "b/a"];
    let filters = ["#", "a/#", "+", "a", "+/+", "a/b", "+/b", "b/#"];
    for sub_pat in patterns {
        for pub_pat in patterns {
            let (mut sim, auth) = open_sim(14, FaultConfig::none());
            auth.allow("pub", vec![grant(pub_pat, &[Right::Publish])]);
            auth.allow("sub", vec![grant(sub_pat, &[Right::Subscribe, Right::Read])]);
            let p = sim.add_client("pub");
            let s = sim.add_client("sub");
            sim.connect_and_wait(p, true, "c", b"s").unwrap();
            sim.connect_and_wait(s, true, "c", b"s").unwrap();
            let reqs: Vec<(&str, QoS)> = filters.iter().map(|f| (*f, QoS::AtMostOnce)).collect();
            let granted = sim.subscribe_and_wait(s, &reqs).unwrap();
            let accepted: Vec<&str> = filters
                .iter()
                .zip(&granted)
                .filter(|(_, g)| **g != Granted::Refused)
                .map(|(f, _)| *f)
                .collect();
            for (f, g) in filters.iter().zip(&granted) {
                assert_eq!(*g != Granted::Refused, topic::covers(sub_pat, f), "{sub_pat} {f}");
            }
            for t in &topics {
                sim.publish(p, t, t.as_bytes(), QoS::AtMostOnce, false).unwrap();
            }
            assert!(sim.run_until_idle(1_000));
            let got: BTreeSet<String> = sim.deliveries(s).iter().map(|d| d.topic.clone()).collect();
            let expected: BTreeSet<String> = topics
                .iter()
                .filter(|t| {
                    topic::matches(pub_pat, t)
                        && topic::matches(sub_pat, t)
                        && accepted.iter().any(|f| topic::matches(f, t))
                })
                .cloned()
                .collect();
            assert_eq!(got, expected, "sub {sub_pat} pub {pub_pat}");
        }
    }
}

#[test]
fn bridge_captures_configured_topics() {
    let auth = Arc::new(AllowList::new());
    let mut config = SimConfig::default();
    config.broker.bridge_topics = vec!["sensors/#".into()];
    let mut sim = Simulation::new(config, auth.clone());
    let p = join(&mut sim, &auth, "dev-1", true);
    sim.publish(p, "sensors/dev-1/temperature", b"21.5", QoS::ExactlyOnce, false).unwrap();
    sim.publish(p, "other", b"x", QoS::AtMostOnce, false).unwrap();
    assert!(sim.run_until_idle(1_000));
    let b = sim.bridged();
    assert_eq!(b.len(), 1);
    assert_eq!(b[0].client_id, "dev-1");
    assert_eq!(b[0].payload, b"21.5");
}

#[test]
fn same_seed_same_schedule() {
    let run = |seed| {
        let (mut sim, auth) = open_sim(seed, lossy());
        let p = join(&mut sim, &auth, "pub", true);
        let s = join(&mut sim, &auth, "sub", true);
        sim.subscribe_and_wait(s, &[("t", QoS::AtLeastOnce)]).unwrap();
        sim.set_faults(p, true);
        sim.set_faults(s, true);
        for i in 0..50 {
            sim.publish_when_ready(p, "t", &payload(i), QoS::AtLeastOnce, false).unwrap();
        }
        sim.run_until_idle(600_000);
        (sim.now(), sim.stats(), sim.deliveries(s).to_vec())
    };
    assert_eq!(run(21), run(21));
}
