use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::identity::{CertificateAuthority, KeyPair, MspRegistry, Role, SigningIdentity};
use crate::ledger::{ChannelConfig, ValidationCode};

/// inc(key) / put(key, value) / get(key) / count(start, end) / fail()
struct Counter;

fn text(args: &[Vec<u8>], i: usize) -> Result<String, ChaincodeError> {
    args.get(i)
        .and_then(|a| String::from_utf8(a.clone()).ok())
        .ok_or_else(|| ChaincodeError::new("BAD_ARGS", format!("arg {i}")))
}

impl Chaincode for Counter {
    fn invoke(&self, ctx: &mut TxContext<'_>, function: &str, args: &[Vec<u8>]) -> Result<Vec<u8>, ChaincodeError> {
        match function {
            "inc" => {
                let key = text(args, 0)?;
                let n: u64 = ctx
                    .get_state(&key)
                    .map(|v| String::from_utf8(v).unwrap().parse().unwrap())
                    .unwrap_or(0);
                let next = (n + 1).to_string().into_bytes();
                ctx.put_state(&key, next.clone());
                Ok(next)
            }
            "put" => {
                ctx.put_state(&text(args, 0)?, args[1].clone());
                Ok(Vec::new())
            }
            "get" => Ok(ctx.get_state(&text(args, 0)?).unwrap_or_default()),
            "count" => {
                let n = ctx.get_state_range(&text(args, 0)?, &text(args, 1)?)?.len();
                ctx.put_state("count", n.to_string().into_bytes());
                Ok(n.to_string().into_bytes())
            }
            _ => Err(ChaincodeError::new("UNKNOWN_FUNCTION", function)),
        }
    }
}

struct TestNet {
    net: Network,
    msp: Arc<MspRegistry>,
    org1: Client,
    org2: Client,
    iot: Client,
    outsider: Client,
}

const ORGS: [&str; 3] = ["Org1", "Org2", "IoT"];

fn testnet(policy: &str, orderer: OrdererConfig, tx_timeout: Duration) -> TestNet {
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let msp = Arc::new(MspRegistry::new());
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let now = clock.now_ms();
    let chaincodes = ChaincodeRegistry::new();
    chaincodes.install(LIFECYCLE_CHAINCODE, Arc::new(Lifecycle));
    chaincodes.install("counter", Arc::new(Counter));
    let net = Network::new(
        msp.clone(),
        chaincodes,
        clock,
        NetworkOptions {
            orderer,
            tx_timeout,
            ..Default::default()
        },
    )
    .unwrap();
    let year = 365 * 24 * 3600 * 1000;
    let mut users = Vec::new();
    let mut admin = None;
    for org in ORGS.iter().chain(&["Outsider"]) {
        let mut ca = CertificateAuthority::new(format!("{org}-CA"), *org, KeyPair::generate(&mut rng));
        msp.add_ca(&ca);
        let peer = ca
            .enroll(&msp, &mut rng, &format!("peer0.{org}"), Role::Peer, year, now)
            .unwrap();
        net.add_peer(peer);
        users.push(
            ca.enroll(&msp, &mut rng, &format!("user@{org}"), Role::Client, year, now)
                .unwrap(),
        );
        if *org == "Org1" {
            admin = Some(ca.enroll(&msp, &mut rng, "admin@Org1", Role::Admin, year, now).unwrap());
        }
    }
    let admin: SigningIdentity = admin.unwrap();
    let genesis = ChannelConfig {
        channel_id: "ch1".into(),
        members: ORGS.iter().map(|o| o.to_string()).collect(),
        endorsement_policy: policy.into(),
    }
    .genesis_block(&admin, now);
    net.create_channel(genesis, &["peer0.Org1", "peer0.Org2", "peer0.IoT"])
        .unwrap();
    match net
        .client(admin)
        .invoke("ch1", LIFECYCLE_CHAINCODE, "deploy", str_args(["counter", "1.0"]))
    {
        Ok(c) => assert_eq!(c.flag, ValidationCode::Valid),
        // short client deadlines: wait for the commit on every peer instead
        Err(TxFlowError::Timeout(_)) => {
            let deadline = std::time::Instant::now() + Duration::from_secs(10);
            while ORGS
                .iter()
                .any(|o| state(&net, &format!("peer0.{o}"), "_lifecycle/counter").is_none())
            {
                assert!(std::time::Instant::now() < deadline);
                std::thread::sleep(Duration::from_millis(10));
            }
        }
        Err(e) => panic!("{e}"),
    }
    let mut users = users.into_iter().map(|u| net.client(u));
    TestNet {
        org1: users.next().unwrap(),
        org2: users.next().unwrap(),
        iot: users.next().unwrap(),
        outsider: users.next().unwrap(),
        msp,
        net,
    }
}

fn fast() -> OrdererConfig {
    OrdererConfig {
        max_block_txs: 10,
        batch_timeout: Duration::from_millis(20),
        ..Default::default()
    }
}

fn default_net() -> TestNet {
    testnet("OUTOF(2,Org1,Org2,IoT)", fast(), Duration::from_secs(10))
}

fn state(net: &Network, peer: &str, key: &str) -> Option<Vec<u8>> {
    assert!(net.sync("ch1", Duration::from_secs(10)).unwrap());
    net.peer(peer).unwrap().channel("ch1").unwrap().state_get(key).map(|v| v.value)
}

#[test]
fn endorsement_is_deterministic_and_does_not_touch_state() {
    let t = default_net();
    let p = t.org1.proposal("ch1", "counter", "put", str_args(["asset1", "21.5"]));
    let a = t.net.peer("peer0.Org1").unwrap().endorse(&p).unwrap();
    let b = t.net.peer("peer0.Org2").unwrap().endorse(&p).unwrap();
    assert_eq!(a.endorsement.rw_set_hash, b.endorsement.rw_set_hash);
    assert_eq!(a.rw_set, b.rw_set);
    assert_eq!(a.rw_set.writes.len(), 1);
    assert_ne!(a.endorsement.endorser, b.endorsement.endorser);
    assert_eq!(state(&t.net, "peer0.Org1", "asset1"), None);
}

#[test]
fn revoked_creator_is_rejected_at_endorsement() {
    let t = default_net();
    let cert = t.org2.identity().cert.clone();
    t.msp.revoke(&cert.issuer, cert.serial).unwrap();
    let p = t.org2.proposal("ch1", "counter", "inc", str_args(["k"]));
    let err = t.net.peer("peer0.Org1").unwrap().endorse(&p).unwrap_err();
    assert!(matches!(err, TxFlowError::AuthFailure(_)), "{err:?}");
}

#[test]
fn tampered_proposal_is_rejected() {
    let t = default_net();
    let mut p = t.org1.proposal("ch1", "counter", "inc", str_args(["k"]));
    p.args = str_args(["other"]);
    assert!(matches!(
        t.net.peer("peer0.Org1").unwrap().endorse(&p),
        Err(TxFlowError::AuthFailure(_))
    ));
}

#[test]
fn non_member_and_undeployed_are_rejected() {
    let t = default_net();
    let err = t.outsider.query("ch1", "counter", "get", str_args(["k"])).unwrap_err();
    assert!(matches!(err, TxFlowError::NotMember { .. }), "{err:?}");
    let err = t.org1.query("ch1", "nope", "get", str_args(["k"])).unwrap_err();
    assert!(matches!(err, TxFlowError::Chaincode(ref e) if e.code == "UNKNOWN_CHAINCODE"), "{err:?}");
    t.net.chaincodes().install("later", Arc::new(Counter));
    let err = t.org1.query("ch1", "later", "get", str_args(["k"])).unwrap_err();
    assert!(matches!(err, TxFlowError::Chaincode(ref e) if e.code == "NOT_DEPLOYED"), "{err:?}");
    let err = t.org1.invoke("ch1", LIFECYCLE_CHAINCODE, "deploy", str_args(["later", "1"])).unwrap_err();
    assert!(matches!(err, TxFlowError::Chaincode(ref e) if e.code == "FORBIDDEN"), "{err:?}");
    let err = t.org1.query("nochannel", "counter", "get", str_args(["k"])).unwrap_err();
    assert!(matches!(err, TxFlowError::UnknownChannel(_)), "{err:?}");
}

#[test]
fn same_block_conflict_keeps_first_writer() {
    let t = default_net();
    let p1 = t.org1.proposal("ch1", "counter", "inc", str_args(["k"]));
    let p2 = t.org2.proposal("ch1", "counter", "inc", str_args(["k"]));
    let r1 = t.org1.endorse(&p1).unwrap();
    let r2 = t.org2.endorse(&p2).unwrap();
    let tx1 = t.org1.assemble(&p1, &r1).unwrap();
    let tx2 = t.org2.assemble(&p2, &r2).unwrap();
    let w1 = t.org1.submit_transaction(&p1, tx1).unwrap();
    let w2 = t.org2.submit_transaction(&p2, tx2).unwrap();
    let (c1, c2) = (w1.wait().unwrap(), w2.wait().unwrap());
    assert_eq!(c1.block_number, c2.block_number);
    assert_eq!(c1.flag, ValidationCode::Valid);
    assert_eq!(c2.flag, ValidationCode::MvccConflict);
    assert_eq!(state(&t.net, "peer0.IoT", "k"), Some(b"1".to_vec()));
}

#[test]
fn insufficient_endorsements_fail_policy_and_write_nothing() {
    let t = testnet("AND(Org1,Org2)", fast(), Duration::from_secs(10));
    let p = t.org1.proposal("ch1", "counter", "put", str_args(["x", "1"]));
    let r = t.org1.endorse_at(&p, &["peer0.Org1"]).unwrap();
    let tx = t.org1.assemble(&p, &r).unwrap();
    let c = t.org1.submit_transaction(&p, tx).unwrap().wait().unwrap();
    assert_eq!(c.flag, ValidationCode::PolicyFailure);
    assert_eq!(state(&t.net, "peer0.Org1", "x"), None);
    let ok = t.org1.invoke("ch1", "counter", "put", str_args(["x", "2"])).unwrap();
    assert_eq!(ok.flag, ValidationCode::Valid);
    assert_eq!(state(&t.net, "peer0.Org2", "x"), Some(b"2".to_vec()));
}

#[test]
fn forged_endorsement_is_bad_signature() {
    let t = default_net();
    let p = t.org1.proposal("ch1", "counter", "put", str_args(["x", "1"]));
    let r = t.org1.endorse(&p).unwrap();
    let mut tx = t.org1.assemble(&p, &r).unwrap();
    tx.endorsements[0].signature[0] ^= 1;
    let c = t.org1.submit_transaction(&p, tx).unwrap().wait().unwrap();
    assert_eq!(c.flag, ValidationCode::BadSignature);
    assert_eq!(state(&t.net, "peer0.Org1", "x"), None);
}

#[test]
fn resubmitted_transaction_is_flagged() {
    let t = default_net();
    let p = t.org1.proposal("ch1", "counter", "put", str_args(["x", "1"]));
    let r = t.org1.endorse(&p).unwrap();
    let tx = t.org1.assemble(&p, &r).unwrap();
    let first = t.org1.submit_transaction(&p, tx.clone()).unwrap().wait().unwrap();
    assert_eq!(first.flag, ValidationCode::Valid);
    let again = t.org1.submit_transaction(&p, tx).unwrap().wait().unwrap();
    assert_eq!(again.flag, ValidationCode::MvccConflict);
    assert!(matches!(t.org1.endorse(&p), Err(TxFlowError::DuplicateTransaction(_))));
}

#[test]
fn phantom_insert_invalidates_range_read() {
    let t = default_net();
    t.org1.invoke("ch1", "counter", "put", str_args(["a1", "x"])).unwrap();
    let scan = t.org1.proposal("ch1", "counter", "count", str_args(["a", "b"]));
    let scan_r = t.org1.endorse(&scan).unwrap();
    assert_eq!(scan_r[0].payload, b"1");
    t.org2.invoke("ch1", "counter", "put", str_args(["a2", "y"])).unwrap();
    let tx = t.org1.assemble(&scan, &scan_r).unwrap();
    let c = t.org1.submit_transaction(&scan, tx).unwrap().wait().unwrap();
    assert_eq!(c.flag, ValidationCode::MvccConflict);
    // a write outside the range does not matter
    let scan = t.org1.proposal("ch1", "counter", "count", str_args(["a", "b"]));
    let scan_r = t.org1.endorse(&scan).unwrap();
    t.org2.invoke("ch1", "counter", "put", str_args(["c1", "z"])).unwrap();
    let tx = t.org1.assemble(&scan, &scan_r).unwrap();
    let c = t.org1.submit_transaction(&scan, tx).unwrap().wait().unwrap();
    assert_eq!(c.flag, ValidationCode::Valid);
    assert_eq!(state(&t.net, "peer0.Org2", "count"), Some(b"2".to_vec()));
}

#[test]
fn conflicting_increments_match_serial_execution() {
    let t = default_net();
    let clients = [&t.org1, &t.org2, &t.iot];
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut submitted = Vec::new();
    for _round in 0..10 {
        // endorse a whole round against one snapshot, then order it
        let mut pending = Vec::new();
        for _ in 0..20 {
            let c = clients[rng.gen_range(0..3)];
            let key = format!("k{}", rng.gen_range(0..5));
            let p = c.proposal("ch1", "counter", "inc", str_args([&key]));
            let r = c.endorse(&p).unwrap();
            let tx = c.assemble(&p, &r).unwrap();
            pending.push((key, c, p, tx));
        }
        let pending: Vec<_> = pending
            .into_iter()
            .map(|(key, c, p, tx)| (key, c.submit_transaction(&p, tx).unwrap()))
            .collect();
        for (key, w) in pending {
            submitted.push((key, w.wait().unwrap()));
        }
    }
    assert_eq!(submitted.len(), 200);
    let valid = submitted.iter().filter(|(_, c)| c.flag.is_valid()).count();
    assert!(valid >= 10 && valid < 200, "valid={valid}");

    // serial re-execution of exactly the valid transactions, in block order
    let peer = t.net.peer("peer0.Org1").unwrap();
    let channel = peer.channel("ch1").unwrap();
    let mut oracle: BTreeMap<String, u64> = BTreeMap::new();
    let mut tx_count = 0;
    for block in channel.blocks() {
        for (tx, flag) in block.transactions.iter().zip(&block.validation_flags) {
            if tx.chaincode_id == "counter" {
                tx_count += 1;
                if flag.is_valid() {
                    *oracle.entry(String::from_utf8(tx.args[0].clone()).unwrap()).or_default() += 1;
                }
            }
        }
    }
    assert_eq!(tx_count, 200);
    for k in 0..5 {
        let key = format!("k{k}");
        let expect = oracle.get(&key).map(|n| n.to_string().into_bytes());
        for p in ["peer0.Org1", "peer0.Org2", "peer0.IoT"] {
            assert_eq!(state(&t.net, p, &key), expect, "{key} at {p}");
        }
    }
    let heads: BTreeSet<_> = ["peer0.Org1", "peer0.Org2", "peer0.IoT"]
        .iter()
        .map(|p| t.net.peer(p).unwrap().channel("ch1").unwrap().head_hash())
        .collect();
    assert_eq!(heads.len(), 1);
    channel.verify_chain().unwrap();
    for block in channel.blocks().iter().skip(1) {
        assert!((1..=10).contains(&block.transactions.len()));
    }
}

#[test]
fn stopped_orderer_is_unavailable() {
    let t = default_net();
    t.net.stop_orderer();
    assert!(!t.net.orderer_running());
    let err = t.org1.invoke("ch1", "counter", "inc", str_args(["k"])).unwrap_err();
    assert_eq!(err, TxFlowError::OrdererUnavailable);
}

#[test]
fn commit_wait_times_out() {
    let slow = OrdererConfig {
        max_block_txs: 100,
        batch_timeout: Duration::from_millis(500),
        ..Default::default()
    };
    let t = testnet("OUTOF(2,Org1,Org2,IoT)", slow, Duration::from_millis(50));
    let err = t.org1.invoke("ch1", "counter", "inc", str_args(["k"])).unwrap_err();
    assert!(matches!(err, TxFlowError::Timeout(_)), "{err:?}");
}

#[test]
fn latency_and_payload_are_reported() {
    let t = default_net();
    let c = t.iot.invoke("ch1", "counter", "inc", str_args(["k"])).unwrap();
    assert_eq!(c.payload, b"1");
    assert!(c.latency > Duration::ZERO && c.latency < Duration::from_secs(5));
    assert_eq!(c.tx_id.len(), 64);
}
