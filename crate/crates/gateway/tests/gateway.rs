use std::net::SocketAddr;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use skylane::presets::{smallcity_100, xiamen_vfh};
use skylane::Scenario;
use skylane_gateway::{attach_role, serve, ApiRequest, ApiResponse, ErrorCode, Gateway, GatewayConfig, PassThroughAuthority, Role};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::protocol::frame::coding::CloseCode;
use tokio_tungstenite::tungstenite::Message;

const TOKEN: &str = "test-token";

async fn start(config: GatewayConfig) -> (SocketAddr, Gateway) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let gw = Gateway::start(config);
    tokio::spawn(serve(listener, gw.clone()));
    (addr, gw)
}

async fn http(addr: SocketAddr, token: Option<&str>, body: &str) -> (u16, Value) {
    let mut s = TcpStream::connect(addr).await.unwrap();
    let auth = token.map(|t| format!("Authorization: Bearer {t}\r\n")).unwrap_or_default();
    let req = format!(
        "POST /api HTTP/1.1\r\nHost: test\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n{auth}\r\n{body}",
        body.len()
    );
    s.write_all(req.as_bytes()).await.unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).await.unwrap();
    let text = String::from_utf8(raw).unwrap();
    let (head, body) = text.split_once("\r\n\r\n").unwrap();
    let status: u16 = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, serde_json::from_str(body).unwrap())
}

async fn call(addr: SocketAddr, verb: &str, body: Value) -> ApiResponse {
    let req = serde_json::to_string(&ApiRequest::new("r", verb, body)).unwrap();
    let (_, v) = http(addr, Some(TOKEN), &req).await;
    serde_json::from_value(v).unwrap()
}

fn quiet_xiamen() -> Scenario {
    let mut s = xiamen_vfh().unwrap();
    s.demands.clear();
    s
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<TcpStream>>;

async fn stream(addr: SocketAddr) -> Ws {
    tokio_tungstenite::connect_async(format!("ws://{addr}/stream?token={TOKEN}")).await.unwrap().0
}

async fn ws_call(ws: &mut Ws, req: ApiRequest) -> ApiResponse {
    let id = req.id.clone();
    ws.send(Message::Text(serde_json::to_string(&req).unwrap().into())).await.unwrap();
    loop {
        let Some(Ok(Message::Text(t))) = ws.next().await else { panic!("stream ended") };
        let v: Value = serde_json::from_str(&t).unwrap();
        if v.get("status").is_some() && v["id"] == id {
            return serde_json::from_value(v).unwrap();
        }
    }
}

async fn wait_state(addr: SocketAddr, state: &str) -> Value {
    for _ in 0..2000 {
        let r = call(addr, "sim.status", Value::Null).await;
        if r.body["state"] == state {
            return r.body;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("never reached {state}");
}

#[tokio::test]
async fn status_is_idle_before_load_and_needs_no_token() {
    let (addr, _) = start(GatewayConfig::new(TOKEN)).await;
    let (code, v) = http(addr, None, r#"{"id": 7, "verb": "sim.status"}"#).await;
    assert_eq!(code, 200);
    assert_eq!(v["id"], 7);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["body"]["state"], "idle");
}

#[tokio::test]
async fn every_other_verb_needs_the_token() {
    let (addr, _) = start(GatewayConfig::new(TOKEN)).await;
    for verb in skylane_gateway::protocol::VERBS.iter().filter(|v| **v != "sim.status") {
        let body = serde_json::to_string(&ApiRequest::new("x", verb, json!({}))).unwrap();
        for token in [None, Some("wrong")] {
            let (code, v) = http(addr, token, &body).await;
            assert_eq!(code, 401, "{verb}");
            assert_eq!(v["error"]["code"], "auth", "{verb}");
            assert_eq!(v["id"], "x");
        }
    }
    // a token in the request itself also works
    let body = serde_json::to_string(&ApiRequest::new(1, "stats.get", Value::Null).with_token(TOKEN)).unwrap();
    let (_, v) = http(addr, None, &body).await;
    assert_eq!(v["error"]["code"], "state");
}

#[tokio::test]
async fn unknown_verbs_and_garbage_are_protocol_errors() {
    let (addr, _) = start(GatewayConfig::new(TOKEN)).await;
    let r = call(addr, "sim.explode", Value::Null).await;
    assert_eq!(r.code(), Some(ErrorCode::Protocol));
    let (code, v) = http(addr, Some(TOKEN), "{not json").await;
    assert_eq!(code, 400);
    assert_eq!(v["error"]["code"], "protocol");
    let r = call(addr, "uav.telemetry.subscribe", json!({})).await;
    assert_eq!(r.code(), Some(ErrorCode::Protocol));
}

#[tokio::test]
async fn run_controls_follow_the_state_machine() {
    let (addr, _) = start(GatewayConfig::new(TOKEN)).await;
    assert_eq!(call(addr, "sim.start", Value::Null).await.code(), Some(ErrorCode::State));
    assert_eq!(call(addr, "network.get", Value::Null).await.code(), Some(ErrorCode::State));
    let bad = call(addr, "scenario.load", json!({"scenario": {"seed": 1}})).await;
    assert_eq!(bad.code(), Some(ErrorCode::Invalid));
    let mut broken = quiet_xiamen();
    broken.fleet[0].home = "nowhere".into();
    let bad = call(addr, "scenario.load", json!({"scenario": broken})).await;
    assert_eq!(bad.code(), Some(ErrorCode::Invalid));
    assert!(bad.error.unwrap().message.contains("nowhere"));

    let r = call(addr, "scenario.load", json!({"scenario": xiamen_vfh().unwrap()})).await;
    assert!(r.is_ok(), "{r:?}");
    assert_eq!(r.body["demands"], 1);
    assert_eq!(call(addr, "sim.status", Value::Null).await.body["state"], "loaded");
    assert_eq!(call(addr, "sim.pause", Value::Null).await.code(), Some(ErrorCode::State));
    let net = call(addr, "network.get", Value::Null).await;
    assert_eq!(net.body["nodes"].as_array().unwrap().len(), 5);

    assert!(call(addr, "sim.start", json!({"until": 100000})).await.is_ok());
    assert_eq!(call(addr, "sim.start", Value::Null).await.code(), Some(ErrorCode::State));
    assert!(call(addr, "sim.pause", Value::Null).await.is_ok());
    let t0 = call(addr, "sim.status", Value::Null).await.body["tick"].as_u64().unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    let t1 = call(addr, "sim.status", Value::Null).await.body["tick"].as_u64().unwrap();
    assert_eq!(t0, t1, "paused engine advanced");
    assert_eq!(call(addr, "scenario.load", json!({"scenario": quiet_xiamen()})).await.code(), Some(ErrorCode::State));
    assert!(call(addr, "sim.resume", Value::Null).await.is_ok());
    let done = wait_state(addr, "finished").await;
    assert_eq!(done["end_reason"], "all_terminal");
    assert_eq!(done["terminal"], 1);
    assert_eq!(call(addr, "sim.resume", Value::Null).await.code(), Some(ErrorCode::State));
    assert_eq!(call(addr, "anomaly.inject", json!({"id": "x", "kind": "wind_gust", "vector": [1, 0, 0]})).await.code(), Some(ErrorCode::State));
    // a finished run may be replaced
    assert!(call(addr, "scenario.load", json!({"scenario": quiet_xiamen()})).await.is_ok());
}

#[tokio::test]
async fn stop_returns_the_report() {
    let (addr, _) = start(GatewayConfig::new(TOKEN)).await;
    call(addr, "scenario.load", json!({"scenario": xiamen_vfh().unwrap(), "seed": 99})).await;
    call(addr, "sim.start", Value::Null).await;
    let r = call(addr, "sim.stop", Value::Null).await;
    assert!(r.is_ok(), "{r:?}");
    assert_eq!(r.body["end_reason"], "stopped");
    assert_eq!(r.body["seed"], 99);
    let again = call(addr, "sim.stop", Value::Null).await;
    assert_eq!(again.body, r.body);
    assert_eq!(call(addr, "sim.start", Value::Null).await.code(), Some(ErrorCode::State));
}

#[tokio::test]
async fn plan_submit_then_query_returns_the_decision() {
    let (addr, _) = start(GatewayConfig::new(TOKEN)).await;
    call(addr, "scenario.load", json!({"scenario": quiet_xiamen()})).await;
    let demand = json!({"id": "D9", "origin": "A000", "destination": "A001", "departure": 0});
    let r = call(addr, "plan.submit", demand.clone()).await;
    assert!(r.is_ok(), "{r:?}");
    assert_eq!(r.body["plan_id"], "P-D9");
    assert_eq!(call(addr, "plan.submit", demand).await.code(), Some(ErrorCode::Invalid));
    let bad = call(addr, "plan.submit", json!({"id": "D10", "origin": "A000", "destination": "nowhere", "departure": 0})).await;
    assert!(!bad.is_ok());
    assert_eq!(call(addr, "plan.query", json!({"plan_id": "P-nope"})).await.code(), Some(ErrorCode::NotFound));

    call(addr, "sim.start", json!({"until": 30})).await;
    wait_state(addr, "finished").await;
    let q = call(addr, "plan.query", json!({"plan_id": "P-D9"})).await;
    assert!(q.is_ok(), "{q:?}");
    assert_eq!(q.body["decision"]["verdict"], "approved");
    assert_eq!(q.body["request"]["origin"], "A000");
    assert!(q.body["state"].is_string());
}

#[tokio::test]
async fn injected_motor_failure_is_applied_within_two_ticks() {
    let mut cfg = GatewayConfig::new(TOKEN);
    cfg.tick_rate = Some(300.0);
    let (addr, _) = start(cfg).await;
    let mut ws = stream(addr).await;
    let r = ws_call(&mut ws, ApiRequest::new(1, "scenario.load", json!({"scenario": xiamen_vfh().unwrap()}))).await;
    assert!(r.is_ok(), "{r:?}");
    let sub = ws_call(&mut ws, ApiRequest::new(2, "uav.telemetry.subscribe", json!({"uavs": ["U000"]}))).await;
    assert!(sub.is_ok());
    ws_call(&mut ws, ApiRequest::new(3, "sim.start", Value::Null)).await;

    // wait until airborne
    let mut last_tick = std::collections::BTreeMap::<String, u64>::new();
    loop {
        let Some(Ok(Message::Text(t))) = ws.next().await else { panic!() };
        let v: Value = serde_json::from_str(&t).unwrap();
        if v["kind"] == "telemetry" && v["payload"]["position"][2].as_f64().unwrap() > 10.0 {
            break;
        }
    }
    let inject = json!({"id": "M1", "kind": "motor_failure", "uav": "U000", "motor": 1, "residual": 0.5});
    ws.send(Message::Text(serde_json::to_string(&ApiRequest::new("inj", "anomaly.inject", inject)).unwrap().into())).await.unwrap();
    let mut accepted = None;
    let applied = loop {
        let Some(Ok(Message::Text(t))) = ws.next().await else { panic!() };
        let v: Value = serde_json::from_str(&t).unwrap();
        if v["id"] == "inj" {
            assert_eq!(v["status"], "ok", "{v}");
            accepted = v["body"]["tick"].as_u64();
            continue;
        }
        if v["kind"] == "telemetry" {
            let uav = v["payload"]["uav"].as_str().unwrap().to_owned();
            let tick = v["tick"].as_u64().unwrap();
            assert!(last_tick.get(&uav).is_none_or(|t| *t < tick), "telemetry out of order");
            last_tick.insert(uav, tick);
        }
        if v["kind"] == "event" && v["payload"]["event"] == "anomaly_applied" {
            break v;
        }
    };
    let accepted = accepted.expect("response precedes the frame");
    let at = applied["tick"].as_u64().unwrap();
    assert!(at >= accepted && at - accepted <= 2, "accepted {accepted}, applied {at}");
    ws_call(&mut ws, ApiRequest::new(4, "sim.stop", Value::Null)).await;
}

#[tokio::test]
async fn uav_command_and_airspace_control() {
    let (addr, _) = start(GatewayConfig::new(TOKEN)).await;
    call(addr, "scenario.load", json!({"scenario": smallcity_100().unwrap()})).await;
    let hold = json!({"uav": "U000", "setpoint": {"mode": "position_hold", "target": [0.0, 0.0, 50.0], "yaw": 0.0}});
    let r = call(addr, "uav.command", hold).await;
    assert!(r.is_ok(), "{r:?}");
    let r = call(addr, "uav.command", json!({"uav": "U000", "setpoint": {"mode": "hover"}})).await;
    assert_eq!(r.code(), Some(ErrorCode::Invalid));
    assert!(call(addr, "uav.command", json!({"uav": "U000", "setpoint": null})).await.is_ok());
    assert_eq!(call(addr, "uav.command", json!({"uav": "ghost"})).await.code(), Some(ErrorCode::NotFound));

    let r = call(addr, "airspace.control", json!({"order": "close_airway", "airways": ["W0000"]})).await;
    assert!(r.is_ok(), "{r:?}");
    assert_eq!(r.body["topic"], "control/order");
    assert_eq!(call(addr, "airspace.control", json!({"order": "teleport"})).await.code(), Some(ErrorCode::Invalid));
    call(addr, "sim.start", json!({"until": 5})).await;
    wait_state(addr, "finished").await;
    let stats = call(addr, "stats.get", Value::Null).await;
    assert!(stats.is_ok());
    assert!(stats.body.is_object());
}

#[tokio::test]
async fn start_needs_attached_external_roles() {
    let (addr, _) = start(GatewayConfig::new(TOKEN)).await;
    call(addr, "scenario.load", json!({"scenario": xiamen_vfh().unwrap(), "external": ["authority"]})).await;
    let r = call(addr, "sim.start", Value::Null).await;
    assert_eq!(r.code(), Some(ErrorCode::State));
    assert!(r.error.unwrap().message.contains("authority"));
}

#[tokio::test]
async fn silent_external_role_aborts_with_external_timeout() {
    let mut cfg = GatewayConfig::new(TOKEN);
    assert_eq!(cfg.ack_timeout, Duration::from_secs(5));
    cfg.ack_timeout = Duration::from_millis(200);
    let (addr, _) = start(cfg).await;
    call(addr, "scenario.load", json!({"scenario": xiamen_vfh().unwrap(), "external": ["authority"]})).await;
    // connects but never acknowledges
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/attach/authority?token={TOKEN}")).await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    let r = call(addr, "sim.start", Value::Null).await;
    assert!(r.is_ok(), "{r:?}");
    let st = wait_state(addr, "finished").await;
    assert_eq!(st["end_reason"], "external timeout");
    assert_eq!(st["tick"], 0);
    let Some(Ok(Message::Text(t))) = ws.next().await else { panic!() };
    assert!(t.contains("\"phase\""));
}

#[tokio::test]
async fn attach_checks_token_role_and_exclusivity() {
    let (addr, _) = start(GatewayConfig::new(TOKEN)).await;
    assert!(tokio_tungstenite::connect_async(format!("ws://{addr}/attach/authority?token=bad")).await.is_err());
    assert!(tokio_tungstenite::connect_async(format!("ws://{addr}/attach/pilot?token={TOKEN}")).await.is_err());
    let first = tokio_tungstenite::connect_async(format!("ws://{addr}/attach/authority?token={TOKEN}")).await.unwrap();
    assert!(tokio_tungstenite::connect_async(format!("ws://{addr}/attach/authority?token={TOKEN}")).await.is_err());
    drop(first);
    tokio::time::sleep(Duration::from_millis(100)).await;
    assert!(tokio_tungstenite::connect_async(format!("ws://{addr}/attach/authority?token={TOKEN}")).await.is_ok());
}

#[tokio::test]
async fn both_roles_external_handshake_every_tick() {
    let (addr, _) = start(GatewayConfig::new(TOKEN)).await;
    call(addr, "scenario.load", json!({"scenario": xiamen_vfh().unwrap(), "external": ["authority", "traffic"]})).await;
    let a = addr.to_string();
    let auth = tokio::spawn(async move { attach_role(&a, TOKEN, Role::Authority, PassThroughAuthority::default()).await });
    let seen = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
    let log = seen.clone();
    let a = addr.to_string();
    let traffic = tokio::spawn(async move {
        let handler = move |tick: u64, inbox: &[skylane::bus::Envelope]| {
            log.lock().unwrap().push((tick, inbox.iter().map(|e| e.topic.clone()).collect::<Vec<_>>()));
            Vec::new()
        };
        attach_role(&a, TOKEN, Role::Traffic, handler).await
    });
    tokio::time::sleep(Duration::from_millis(100)).await;
    assert!(call(addr, "sim.start", json!({"until": 20})).await.is_ok());
    let st = wait_state(addr, "finished").await;
    assert_eq!(st["end_reason"], "until");
    let seen = seen.lock().unwrap().clone();
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), (0..20).collect::<Vec<_>>());
    // the scenario's demand reaches the external traffic manager
    assert_eq!(seen[0].1, vec!["demand/submit".to_string()]);
    auth.abort();
    traffic.abort();
}

#[tokio::test]
async fn slow_stream_clients_are_dropped_without_stalling_the_engine() {
    let mut cfg = GatewayConfig::new(TOKEN);
    cfg.stream_buffer = 16;
    let (addr, _) = start(cfg).await;
    let mut lazy = stream(addr).await;
    call(addr, "scenario.load", json!({"scenario": smallcity_100().unwrap()})).await;
    call(addr, "sim.start", json!({"until": 3000})).await;
    // never read; the engine must still finish
    let st = wait_state(addr, "finished").await;
    assert_eq!(st["end_reason"], "until");
    let mut closed = None;
    while let Some(m) = lazy.next().await {
        match m {
            Ok(Message::Close(f)) => {
                closed = f;
                break;
            }
            Ok(_) => {}
            Err(_) => break,
        }
    }
    let f = closed.expect("close frame");
    assert_eq!(f.code, CloseCode::from(skylane_gateway::server::CLOSE_SLOW_CONSUMER));
}
