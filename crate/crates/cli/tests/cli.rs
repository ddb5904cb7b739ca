use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use passion_broker::{QoS, TcpClient};
use passion_core::codec::{b64_decode, sha256};
use passion_core::identity::Certificate;
use passion_core::ledger::ChannelConfig;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_passion");
const CH: &str = "iotchannel";

fn passion(home: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--home")
        .arg(home)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(home: &Path, args: &[&str]) -> String {
    let o = passion(home, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap().trim().to_string()
}

/// (exit status, the single stderr line)
fn fails(home: &Path, args: &[&str]) -> (i32, String) {
    let o = passion(home, args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    (o.status.code().unwrap(), err.trim().to_string())
}

fn node_subjects(home: &Path) -> (BTreeSet<String>, Vec<Vec<u8>>) {
    let mut subjects = BTreeSet::new();
    let mut keys = Vec::new();
    for e in fs::read_dir(home.join("certs/nodes")).unwrap() {
        let body = fs::read_to_string(e.unwrap().path()).unwrap();
        let cert = Certificate::from_json(&body).unwrap();
        keys.push(cert.public_key.clone());
        subjects.insert(cert.subject);
    }
    keys.sort();
    (subjects, keys)
}

/// Network with the contract deployed on `iotchannel`.
fn deployed(home: &Path) {
    ok(home, &["network", "up"]);
    ok(home, &["channel", "create", CH]);
    ok(home, &["chaincode", "deploy", CH]);
}

#[test]
fn network_up_writes_the_node_roster() {
    let dir = tempfile::tempdir().unwrap();
    let home = dir.path();
    let out = ok(home, &["network", "up"]);
    assert!(out.starts_with("wrote 12 node certificates"), "{out}");
    let (subjects, keys) = node_subjects(home);
    let roster: BTreeSet<String> = [
        "Org1-CA", "Org1-TLS-CA", "peer@org1", "Org2-CA", "Org2-TLS-CA", "peer@org2", "IoT-CA", "IoT-TLS-CA",
        "peer@IoT", "Orderer-CA", "Orderer-TLS-CA", "Solo@Orderer",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    assert_eq!(subjects, roster);

    // certificate files use snake_case keys and base64 byte fields
    let body: Value = serde_json::from_str(&fs::read_to_string(home.join("certs/nodes/peer@IoT.cert.json")).unwrap()).unwrap();
    let keys_of: BTreeSet<&str> = body.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(
        keys_of,
        ["issuer", "not_after", "org", "public_key", "role", "serial", "signature", "subject"].into()
    );
    assert_eq!(b64_decode(body["public_key"].as_str().unwrap()).unwrap().len(), 32);

    let (code, line) = fails(home, &["network", "up"]);
    assert_eq!((code, line.starts_with("ERROR ALREADY_INITIALIZED:")), (13, true));

    // teardown and re-up: same subjects, fresh keys
    ok(home, &["network", "down"]);
    ok(home, &["network", "up"]);
    let (again, new_keys) = node_subjects(home);
    assert_eq!(again, roster);
    assert!(keys.iter().all(|k| !new_keys.contains(k)));
}

#[test]
fn invoke_then_query_checksum_matches_local_hash() {
    let dir = tempfile::tempdir().unwrap();
    let home = dir.path();
    deployed(home);
    ok(home, &["identity", "enroll", "IoT", "dev-1"]);
    let pk = ok(home, &["identity", "public-key", "dev-1"]);
    ok(home, &["chaincode", "invoke", CH, "register_device", "dev-1", &pk, "sensors/dev-1/#", "--as", "admin@IoT"]);
    ok(home, &["identity", "grant", CH, "admin@IoT", "dev-1", "read,write", "--as", "admin@IoT"]);

    let id = "3b241101-e2bb-4255-8caf-4136c566a962";
    let payload = "{\"celsius\":21.5}";
    let out = ok(
        home,
        &["chaincode", "invoke", CH, "store_asset", id, "dev-1", "temperature", payload, "1700000000000", "--as", "admin@IoT"],
    );
    let receipt: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(receipt["flag"], "Valid");
    let checksum = ok(home, &["chaincode", "query", CH, "query_checksum", id, "--as", "admin@IoT"]);
    assert_eq!(checksum, sha256(payload.as_bytes()).to_hex());

    // the commit survived the process: the stored chain holds it
    let status = ok(home, &["network", "status"]);
    assert_eq!(status, format!("{CH} height=5"));
    ok(home, &["ledger", "verify", CH]);

    let (code, line) = fails(home, &["chaincode", "query", CH, "get_asset", "nope", "--as", "admin@IoT"]);
    assert_eq!(code, 20);
    assert!(line.starts_with("ERROR CHAINCODE: NOT_FOUND"), "{line}");
}

#[test]
fn tampered_import_is_reported_by_block() {
    let dir = tempfile::tempdir().unwrap();
    let home = dir.path();
    deployed(home);
    let export = dir.path().join("export");
    ok(home, &["ledger", "export", CH, "--dir", export.to_str().unwrap()]);
    let block = export.join(CH).join("block_1.json");
    let mut bytes = fs::read(&block).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    fs::write(&block, bytes).unwrap();
    ok(home, &["ledger", "import", CH, "--dir", export.to_str().unwrap()]);
    let (code, line) = fails(home, &["ledger", "verify", CH]);
    assert_eq!(code, 19);
    assert_eq!(line, format!("ERROR TAMPERED: channel {CH}: hash chain broken at block 1"));
    // other commands refuse to load the broken chain
    let (code, line) = fails(home, &["chaincode", "query", CH, "get_asset", "x"]);
    assert_eq!(code, 18);
    assert!(line.contains("block 1"), "{line}");
}

#[test]
fn error_codes_are_distinct_and_documented() {
    let dir = tempfile::tempdir().unwrap();
    let home = dir.path();
    let help = ok(home, &["--help"]);
    for (code, status, _) in passion_cli::ERROR_CODES {
        assert!(help.contains(code), "{code} missing from --help");
        assert!(help.contains(&format!(" {status} ")), "status {status} missing from --help");
    }

    let mut seen = BTreeSet::new();
    let mut check = |(status, line): (i32, String), code: &str| {
        assert!(line.starts_with(&format!("ERROR {code}: ")), "{line}");
        assert!(seen.insert((status, code.to_string())));
    };
    check(fails(home, &["channel", "create", CH]), "NOT_INITIALIZED");
    ok(home, &["network", "up"]);
    check(fails(home, &["channel", "create", "nope"]), "UNKNOWN_CHANNEL");
    ok(home, &["channel", "create", CH]);
    check(fails(home, &["channel", "create", CH]), "CHANNEL_EXISTS");
    check(fails(home, &["chaincode", "query", CH, "get_asset", "x", "--as", "ghost"]), "UNKNOWN_IDENTITY");
    check(fails(home, &["identity", "enroll", "IoT", "user@IoT"]), "IDENTITY");
    check(fails(home, &["bench", "run", "--config", "/nonexistent.json"]), "IO");
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"rounds\":[]}").unwrap();
    check(fails(home, &["bench", "run", "--config", bad.to_str().unwrap()]), "CONFIG");
    // the chaincode is not deployed yet
    check(fails(home, &["chaincode", "invoke", CH, "get_asset", "x"]), "CHAINCODE");
    // the orderer's org is not a channel member
    check(fails(home, &["chaincode", "query", CH, "get_asset", "x", "--as", "Solo@Orderer"]), "NETWORK");
    let statuses: BTreeSet<i32> = seen.iter().map(|s| s.0).collect();
    assert_eq!(statuses.len(), seen.len());
    // clap usage errors
    assert_eq!(passion(home, &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn channel_genesis_matches_config() {
    let dir = tempfile::tempdir().unwrap();
    let home = dir.path();
    ok(home, &["network", "up"]);
    ok(home, &["channel", "create", CH]);
    let genesis = fs::read(home.join("ledger").join(CH).join("block_0.json")).unwrap();
    let block = passion_core::ledger::Block::from_canonical(&genesis).unwrap();
    let config = ChannelConfig::from_genesis(&block).unwrap();
    assert_eq!(config.channel_id, CH);
    assert_eq!(config.members.iter().cloned().collect::<BTreeSet<_>>(), ["IoT", "Org1", "Org2"].map(String::from).into());
    assert_eq!(config.endorsement_policy, "OUTOF(2,Org1,Org2,IoT)");
}

#[test]
fn bench_run_prints_table_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let home = dir.path();
    deployed(home);
    let report = dir.path().join("report.json");
    let config = serde_json::json!({
        "workers": 2, "seed": 9, "state_db": "document-store", "report_path": report,
        "rounds": [
            {"label": "batch-1", "function": "get_assets_from_batch", "tx_count": 10, "send_rate_tps": 20, "batch_size": 1, "asset_pool": 20},
            {"label": "store", "function": "store_asset", "tx_count": 10, "send_rate_tps": 20}
        ]
    });
    let cfg = dir.path().join("bench.json");
    fs::write(&cfg, config.to_string()).unwrap();
    let out = ok(home, &["bench", "run", "--config", cfg.to_str().unwrap()]);
    let header = out.lines().next().unwrap();
    let columns: Vec<&str> = header.split('|').map(str::trim).filter(|c| !c.is_empty()).collect();
    assert_eq!(columns, ["Label", "Send Rate", "Throughput", "Min", "Avg", "Max", "P95"]);
    assert_eq!(out.lines().filter(|l| l.contains("batch-1") || l.contains("store")).count(), 2);
    let json: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for r in json["rounds"].as_array().unwrap() {
        assert_eq!(r["submitted"], 10);
        assert_eq!(r["committed"], 10);
    }
    ok(home, &["ledger", "verify", CH]);
}

#[test]
fn broker_serve_authenticates_against_the_stored_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let home = dir.path();
    deployed(home);
    for (subject, role) in [("dev-1", "device"), ("broker@IoT", "client")] {
        ok(home, &["identity", "enroll", "IoT", subject, "--role", role]);
    }
    let pk = ok(home, &["identity", "public-key", "dev-1"]);
    ok(home, &["chaincode", "invoke", CH, "register_device", "dev-1", &pk, "sensors/dev-1/#", "--as", "admin@IoT"]);
    ok(home, &["identity", "grant", CH, "dev-1", "sensors/dev-1/#", "publish", "--as", "admin@IoT"]);
    ok(home, &["identity", "grant", CH, "broker@IoT", "dev-1", "write", "--as", "admin@IoT"]);
    ok(home, &["identity", "grant", CH, "admin@IoT", "dev-1", "read", "--as", "admin@IoT"]);

    // the challenge is committed before the broker loads the ledger
    let issued: Value = serde_json::from_str(
        &serde_json::from_str::<Value>(&ok(home, &["chaincode", "invoke", CH, "issue_challenge", "dev-1", "--as", "dev-1"]))
            .unwrap()["payload"]
            .as_str()
            .unwrap()
            .to_string(),
    )
    .unwrap();
    let cid = issued["challenge_id"].as_str().unwrap().to_string();
    let sig = ok(home, &["identity", "sign", "dev-1", issued["nonce"].as_str().unwrap()]);

    let cfg = dir.path().join("broker.json");
    fs::write(
        &cfg,
        serde_json::json!({"channel": CH, "identity": "broker@IoT", "listen": "127.0.0.1:0", "bridge_topics": ["sensors/#"]})
            .to_string(),
    )
    .unwrap();
    let mut child = Command::new(BIN)
        .arg("--home")
        .arg(home)
        .args(["broker", "serve", "--config", cfg.to_str().unwrap(), "--duration-ms", "4000"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    let addr = first.strip_prefix("listening on ").expect("listening line").to_string();

    let t = Duration::from_secs(10);
    let sig = b64_decode(&sig).unwrap();
    let (dev, _) = TcpClient::connect(addr.as_str(), "dev-1", true, &cid, &sig, t).unwrap();
    dev.publish("sensors/dev-1/humidity", b"48%", QoS::AtLeastOnce, false, t).unwrap();
    assert!(dev.flush(t));
    dev.disconnect();
    // replaying the spent challenge is refused with bad credentials
    assert!(TcpClient::connect(addr.as_str(), "dev-1", true, &cid, &sig, t).is_err());

    let last = lines.map(|l| l.unwrap()).last().unwrap();
    assert!(child.wait().unwrap().success());
    assert!(last.contains("1 committed"), "{last}");

    let assets: Value = serde_json::from_str(&ok(
        home,
        &[
            "chaincode", "query", CH, "key_range_query", "00000000-0000-0000-0000-000000000000",
            "ffffffff-ffff-ffff-ffff-ffffffffffff", "--as", "admin@IoT",
        ],
    ))
    .unwrap();
    let assets = assets.as_array().unwrap();
    assert_eq!(assets.len(), 1);
    assert_eq!(assets[0]["checksum"], sha256(b"48%").to_hex());
    assert_eq!(assets[0]["sensor_type"], "humidity");
}
