mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde_json::json;
use sidiff_core::backends::http::{HttpClient, HttpImageModel, OpenAiChat, OpenAiEmbed, RetryPolicy};
use sidiff_core::backends::mock::MockImageModel;
use sidiff_core::backends::{
    edit_image, embed_text, generate_image, ChatBackend, ChatMessage, ChatRequest, GenerationParams,
    ImageGenerator,
};
use sidiff_core::Error;

use common::{chat_ok, Stub};

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_retries: 3,
        base_delay: Duration::from_millis(20),
        max_delay: Duration::from_millis(200),
    }
}

fn client(key: Option<&str>) -> HttpClient {
    HttpClient::new(key.map(str::to_string), fast_retry(), Duration::from_secs(5))
}

fn hello() -> ChatRequest {
    ChatRequest::new(vec![ChatMessage::system("sys"), ChatMessage::user("hi")])
}

#[test]
fn chat_survives_two_429s_with_backoff() {
    let stub = Stub::start(vec![
        (429, "{}".into()),
        (429, "{}".into()),
        (200, chat_ok("hello")),
    ]);
    let chat = OpenAiChat::new(client(Some("sk-test")), &stub.url, "m");
    let t = Instant::now();
    assert_eq!(chat.chat_complete(&hello()).unwrap(), "hello");
    // 20 ms then 40 ms of backoff
    assert!(t.elapsed() >= Duration::from_millis(60));
    let seen = stub.join();
    assert_eq!(seen.len(), 3);
    assert!(seen.iter().all(|s| s.path == "/v1/chat/completions"));
    assert_eq!(seen[0].header("authorization"), Some("Bearer sk-test"));
    assert_eq!(seen[0].body["model"], "m");
    assert_eq!(seen[0].body["messages"][1], json!({"role": "user", "content": "hi"}));
}

#[test]
fn transient_failures_give_up_after_max_retries() {
    let stub = Stub::start(vec![(500, "{}".into()); 4]);
    let chat = OpenAiChat::new(client(None), &stub.url, "m");
    let err = chat.chat_complete(&hello()).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
    assert_eq!(stub.join().len(), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = Stub::start(vec![(400, "{\"error\":\"bad\"}".into())]);
    let chat = OpenAiChat::new(client(None), &stub.url, "m");
    assert!(matches!(chat.chat_complete(&hello()), Err(Error::Protocol(_))));
    let seen = stub.join();
    assert_eq!(seen.len(), 1);
    assert!(seen[0].header("authorization").is_none());
}

#[test]
fn empty_and_malformed_completions() {
    let stub = Stub::start(vec![(200, chat_ok("  ")), (200, "{\"nope\":1}".into())]);
    let chat = OpenAiChat::new(client(None), &stub.url, "m");
    assert!(matches!(chat.chat_complete(&hello()), Err(Error::EmptyCompletion)));
    assert!(matches!(chat.chat_complete(&hello()), Err(Error::Protocol(_))));
    stub.join();
}

#[test]
fn connection_refused_is_transport() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let chat = OpenAiChat::new(client(None), &format!("http://127.0.0.1:{port}"), "m");
    assert!(matches!(chat.chat_complete(&hello()), Err(Error::Transport(_))));
}

#[test]
fn embeddings_are_normalized_and_dimension_checked() {
    let body = json!({"data": [{"embedding": [3.0, 4.0]}]}).to_string();
    let stub = Stub::start(vec![(200, body.clone()), (200, body)]);
    let embed = OpenAiEmbed::new(client(None), &stub.url, "e");
    let v = embed_text(&embed, "a cat", 2).unwrap();
    assert!((v.values()[0] - 0.6).abs() < 1e-6 && (v.values()[1] - 0.8).abs() < 1e-6);
    assert!(matches!(
        embed_text(&embed, "a cat", 4),
        Err(Error::DimensionMismatch { expected: 4, actual: 2 })
    ));
    let seen = stub.join();
    assert_eq!(seen[0].path, "/v1/embeddings");
    assert_eq!(seen[0].body, json!({"model": "e", "input": "a cat"}));
}

#[test]
fn image_generate_and_edit_round_trip() {
    let png = MockImageModel::new()
        .generate("x", "", 1, &GenerationParams::default())
        .unwrap()
        .bytes;
    let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
    let ok = json!({"image_b64": b64, "width": 64, "height": 64}).to_string();
    let stub = Stub::start(vec![(200, ok.clone()), (200, ok)]);
    let c = client(None);
    let gen = HttpImageModel::generator(c.clone(), &stub.url);
    let edit = HttpImageModel::editor(c, &format!("{}/", stub.url));
    let params = GenerationParams::default();
    let base = Arc::new(generate_image(&gen, "a cat", "blurry", 7, &params).unwrap());
    assert_eq!(base.bytes, png);
    let edited = edit_image(&edit, Some(&base), "fix hands", "blurry", 8, &params).unwrap();
    assert!(Arc::ptr_eq(edited.parent.as_ref().unwrap(), &base));

    let seen = stub.join();
    assert_eq!(seen[0].path, "/generate");
    assert_eq!(
        seen[0].body,
        json!({"prompt": "a cat", "negative_prompt": "blurry", "seed": 7, "guidance_scale": 4.0, "width": 1024, "height": 1024})
    );
    assert_eq!(seen[1].path, "/edit");
    assert_eq!(seen[1].body["image"], json!(b64));
    assert_eq!(seen[1].body["width"], 64);
}

#[test]
fn image_rejections_and_bad_payloads() {
    let stub = Stub::start(vec![
        (400, "{\"error\":\"nsfw\"}".into()),
        (200, json!({"image_b64": "!!!", "width": 1, "height": 1}).to_string()),
    ]);
    let gen = HttpImageModel::generator(client(None), &stub.url);
    let params = GenerationParams::default();
    assert!(matches!(
        generate_image(&gen, "a cat", "", 1, &params),
        Err(Error::GenerationRejected(_))
    ));
    assert!(matches!(generate_image(&gen, "a cat", "", 1, &params), Err(Error::Decode(_))));
    stub.join();
}
