//! Exercises the networked OpenAI-compatible provider against a local stub
//! server: request shape, token extraction, retry behavior and embedding
//! normalization.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use divert::providers::{
    ChatMessage, ChatProvider, ChatRequest, Embedder, HttpChatProvider, HttpEmbedder,
    HttpProviderConfig, ProviderError, RoleTag,
};

/// Serves scripted (status, body) responses one connection at a time and
/// records request bodies.
fn spawn_stub(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
    let endpoint = format!("http://{}", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = bodies.clone();
    std::thread::spawn(move || {
        for (status, body) in responses {
            let Ok((mut stream, _)) = listener.accept() else {
                return;
            };
            let mut raw = Vec::new();
            let mut buf = [0u8; 4096];
            let header_end = loop {
                match stream.read(&mut buf) {
                    Ok(0) => return,
                    Ok(n) => {
                        raw.extend_from_slice(&buf[..n]);
                        if let Some(pos) = raw.windows(4).position(|w| w == b"\r\n\r\n") {
                            break pos + 4;
                        }
                    }
                    Err(_) => return,
                }
            };
            let head = String::from_utf8_lossy(&raw[..header_end]).to_string();
            let content_length: usize = head
                .lines()
                .find_map(|l| {
                    let (name, value) = l.split_once(':')?;
                    name.eq_ignore_ascii_case("content-length")
                        .then(|| value.trim().parse().ok())?
                })
                .unwrap_or(0);
            while raw.len() < header_end + content_length {
                match stream.read(&mut buf) {
                    Ok(0) => break,
                    Ok(n) => raw.extend_from_slice(&buf[..n]),
                    Err(_) => return,
                }
            }
            let body_text = String::from_utf8_lossy(&raw[header_end..]).to_string();
            seen.lock().unwrap().push(body_text);
            let response = format!(
                "HTTP/1.1 {status} STUB\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(response.as_bytes());
        }
    });
    (endpoint, bodies)
}

fn provider_config(endpoint: String) -> HttpProviderConfig {
    let mut models = BTreeMap::new();
    models.insert(RoleTag::Agent, "agent-model".to_string());
    models.insert(RoleTag::Junction, "framework-model".to_string());
    HttpProviderConfig {
        endpoint,
        api_key: Some("test-key".into()),
        models,
        embedding_model: "embed-model".into(),
        timeout: Duration::from_secs(5),
    }
}

fn chat_body(content: &str, prompt: u64, completion: u64) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": content}}],
        "usage": {"prompt_tokens": prompt, "completion_tokens": completion}
    })
    .to_string()
}

#[test]
fn chat_completion_round_trip_and_wire_shape() {
    let (endpoint, bodies) = spawn_stub(vec![(200, chat_body("All sorted.", 12, 5))]);
    let provider = HttpChatProvider::new(provider_config(endpoint)).unwrap();
    let request = ChatRequest::new(
        vec![
            ChatMessage::new("system", "You are a support agent."),
            ChatMessage::new("user", "cancel o42 please"),
            ChatMessage::new("assistant", "TOOL lookup_order {\"order_id\":\"o42\"}"),
            ChatMessage::new("tool", "[lookup_order] ok: order o42: status=open"),
        ],
        0.0,
        3,
        RoleTag::Agent,
    )
    .with_seed(42);

    let result = provider.chat_complete(&request).unwrap();
    assert_eq!(result.content, "All sorted.");
    assert_eq!(result.tokens.prompt_tokens, 12);
    assert_eq!(result.tokens.completion_tokens, 5);
    assert_eq!(result.attempts, 1);

    let bodies = bodies.lock().unwrap();
    let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(sent["model"], "agent-model");
    assert_eq!(sent["temperature"], 0.0);
    assert_eq!(sent["seed"], 42);
    let messages = sent["messages"].as_array().unwrap();
    assert_eq!(messages.len(), 4);
    assert_eq!(messages[0]["role"], "system");
    assert_eq!(messages[2]["role"], "assistant");
    // tool results travel as plain user text, not a function-calling format
    assert_eq!(messages[3]["role"], "user");
    assert!(messages[3]["content"]
        .as_str()
        .unwrap()
        .starts_with("Tool result:"));
}

#[test]
fn transient_failures_retry_within_the_budget() {
    let (endpoint, _) = spawn_stub(vec![
        (500, "{\"error\": \"overloaded\"}".into()),
        (200, chat_body("second try", 7, 3)),
    ]);
    let provider = HttpChatProvider::new(provider_config(endpoint)).unwrap();
    let request = ChatRequest::new(vec![ChatMessage::new("user", "hi")], 0.7, 3, RoleTag::Agent);
    let result = provider.chat_complete(&request).unwrap();
    assert_eq!(result.attempts, 2);
    assert_eq!(result.content, "second try");
}

#[test]
fn persistent_failures_exhaust_with_attempt_count() {
    let (endpoint, _) = spawn_stub(vec![
        (500, "{}".into()),
        (502, "{}".into()),
        (503, "{}".into()),
    ]);
    let provider = HttpChatProvider::new(provider_config(endpoint)).unwrap();
    let request = ChatRequest::new(vec![ChatMessage::new("user", "hi")], 0.7, 3, RoleTag::Agent);
    match provider.chat_complete(&request) {
        Err(ProviderError::Exhausted { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected exhaustion, got {other:?}"),
    }
}

#[test]
fn empty_completions_are_transient_failures() {
    let empty = serde_json::json!({"choices": [], "usage": null}).to_string();
    let (endpoint, _) = spawn_stub(vec![(200, empty.clone()), (200, empty)]);
    let provider = HttpChatProvider::new(provider_config(endpoint)).unwrap();
    let request = ChatRequest::new(vec![ChatMessage::new("user", "hi")], 0.7, 2, RoleTag::Agent);
    match provider.chat_complete(&request) {
        Err(ProviderError::Exhausted { last_error, .. }) => {
            assert!(last_error.contains("empty completion"), "{last_error}");
        }
        other => panic!("expected exhaustion, got {other:?}"),
    }
}

#[test]
fn embeddings_are_normalized() {
    let body = serde_json::json!({"data": [{"embedding": [3.0, 4.0]}]}).to_string();
    let (endpoint, bodies) = spawn_stub(vec![(200, body)]);
    let embedder = HttpEmbedder::new(provider_config(endpoint), 3).unwrap();
    let vector = embedder.embed("hello world").unwrap();
    assert!((vector.components()[0] - 0.6).abs() < 1e-9);
    assert!((vector.components()[1] - 0.8).abs() < 1e-9);
    let sent: serde_json::Value = serde_json::from_str(&bodies.lock().unwrap()[0]).unwrap();
    assert_eq!(sent["model"], "embed-model");
    assert_eq!(sent["input"], "hello world");
}
