use std::sync::Arc;
use std::time::Duration;

use passion_broker::{AllowList, BrokerConfig, BrokerServer, QoS, TcpClient};
use passion_core::txflow::SystemClock;

const T: Duration = Duration::from_secs(5);

fn server() -> BrokerServer {
    let auth = Arc::new(AllowList::new());
    for id in ["pub", "sub"] {
        auth.allow_all(id);
    }
    BrokerServer::bind("127.0.0.1:0", BrokerConfig::default(), auth, None, Arc::new(SystemClock)).unwrap()
}

#[test]
fn persistent_session_over_tcp() {
    let srv = server();
    let addr = srv.local_addr();
    let (publisher, _) = TcpClient::connect(addr, "pub", true, "c", b"s", T).unwrap();
    let (sub, present) = TcpClient::connect(addr, "sub", false, "c", b"s", T).unwrap();
    assert!(!present);
    sub.subscribe(&[("t/#", QoS::ExactlyOnce)], T).unwrap();
    sub.disconnect();

    for i in 0..20 {
        publisher.publish("t/x", format!("{i}").as_bytes(), QoS::ExactlyOnce, false, T).unwrap();
    }
    assert!(publisher.flush(T));
    assert_eq!(srv.inspect(|b| b.session("sub").unwrap().offline_queue), 20);

    let (sub, present) = TcpClient::connect(addr, "sub", false, "c", b"s", T).unwrap();
    assert!(present);
    let got: Vec<String> = (0..20)
        .map(|_| String::from_utf8(sub.recv(T).expect("queued message").payload).unwrap())
        .collect();
    assert_eq!(got, (0..20).map(|i| i.to_string()).collect::<Vec<_>>());
}

#[test]
fn takeover_over_tcp() {
    let srv = server();
    let addr = srv.local_addr();
    let (first, _) = TcpClient::connect(addr, "sub", true, "c", b"s", T).unwrap();
    let (second, _) = TcpClient::connect(addr, "sub", true, "c", b"s", T).unwrap();
    let deadline = std::time::Instant::now() + T;
    while first.is_connected() && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
    assert!(!first.is_connected());
    assert!(second.is_connected());
}

#[test]
fn garbage_line_closes_the_connection() {
    use std::io::{BufRead, BufReader, Write};
    let srv = server();
    let mut s = std::net::TcpStream::connect(srv.local_addr()).unwrap();
    s.write_all(b"{\"type\":\"publish\"}\n").unwrap();
    s.set_read_timeout(Some(T)).unwrap();
    let mut line = String::new();
    assert_eq!(BufReader::new(s).read_line(&mut line).unwrap(), 0);
}
