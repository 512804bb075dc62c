//! Wire-level tests for the HTTP text and image backends, against a
//! scripted single-threaded HTTP/1.1 stub.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use scenegen::backend::{
    BackendError, GenerationParams, HttpImageBackend, HttpImageConfig, ImageBackend,
    MockImageBackend, RetryPolicy,
};
use scenegen::orchestrator::request_image;
use scenegen::prompts::llm::{DescriptorRequest, HttpTextBackend, TextBackendConfig, TextCompletion};
use scenegen::prompts::PromptError;

struct StubResponse {
    status: u16,
    content_type: &'static str,
    body: Vec<u8>,
}

impl StubResponse {
    fn json(status: u16, body: &str) -> Self {
        StubResponse {
            status,
            content_type: "application/json",
            body: body.as_bytes().to_vec(),
        }
    }
}

struct StubServer {
    url: String,
    hits: Arc<AtomicUsize>,
}

/// Serve the scripted responses, one connection each, then stop.
fn serve(responses: Vec<StubResponse>) -> StubServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/generate", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let hits_clone = hits.clone();
    thread::spawn(move || {
        for response in responses {
            let Ok((mut stream, _)) = listener.accept() else { return };
            hits_clone.fetch_add(1, Ordering::SeqCst);
            // read headers, then exactly content-length body bytes
            let mut buf = Vec::new();
            let mut chunk = [0u8; 1024];
            let header_end = loop {
                match stream.read(&mut chunk) {
                    Ok(0) => break None,
                    Ok(n) => {
                        buf.extend_from_slice(&chunk[..n]);
                        if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                            break Some(pos + 4);
                        }
                    }
                    Err(_) => break None,
                }
            };
            if let Some(header_end) = header_end {
                let headers = String::from_utf8_lossy(&buf[..header_end]).to_lowercase();
                let content_length = headers
                    .lines()
                    .find_map(|l| l.strip_prefix("content-length:"))
                    .and_then(|v| v.trim().parse::<usize>().ok())
                    .unwrap_or(0);
                while buf.len() < header_end + content_length {
                    match stream.read(&mut chunk) {
                        Ok(0) => break,
                        Ok(n) => buf.extend_from_slice(&chunk[..n]),
                        Err(_) => break,
                    }
                }
            }
            let reason = match response.status {
                200 => "OK",
                404 => "Not Found",
                _ => "Err",
            };
            let head = format!(
                "HTTP/1.1 {} {}\r\ncontent-type: {}\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
                response.status,
                reason,
                response.content_type,
                response.body.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(&response.body);
        }
    });
    StubServer { url, hits }
}

fn text_config(url: &str) -> TextBackendConfig {
    TextBackendConfig {
        url: url.to_string(),
        model: "test-model".into(),
        auth_env: None,
        timeout_secs: 5,
        max_attempts: 3,
        backoff_ms: 1,
    }
}

fn descriptor_request() -> DescriptorRequest {
    DescriptorRequest::new(
        "expand the caption".into(),
        "A photo of V* driving scene, car, rainy, daytime".into(),
        0.7,
        120,
    )
    .unwrap()
}

#[test]
fn text_backend_retries_5xx_then_succeeds() {
    let server = serve(vec![
        StubResponse::json(500, "{}"),
        StubResponse::json(500, "{}"),
        StubResponse::json(
            200,
            r#"{"choices": [{"message": {"content": "wet asphalt in flat grey light"}}]}"#,
        ),
    ]);
    let backend = HttpTextBackend::new(text_config(&server.url)).unwrap();
    let text = backend.complete(&descriptor_request()).unwrap();
    assert_eq!(text, "wet asphalt in flat grey light");
    assert_eq!(server.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn text_backend_exhausts_retries() {
    let server = serve(vec![
        StubResponse::json(500, "{}"),
        StubResponse::json(500, "{}"),
        StubResponse::json(500, "{}"),
    ]);
    let backend = HttpTextBackend::new(text_config(&server.url)).unwrap();
    match backend.complete(&descriptor_request()) {
        Err(PromptError::BackendUnavailable { attempts: 3, .. }) => {}
        other => panic!("expected exhausted retries, got {other:?}"),
    }
    assert_eq!(server.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn text_backend_does_not_retry_4xx() {
    let server = serve(vec![StubResponse::json(404, "{}")]);
    let backend = HttpTextBackend::new(text_config(&server.url)).unwrap();
    match backend.complete(&descriptor_request()) {
        Err(PromptError::BackendUnavailable { attempts: 1, .. }) => {}
        other => panic!("expected immediate failure, got {other:?}"),
    }
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn text_backend_flags_shapeless_responses() {
    let server = serve(vec![StubResponse::json(200, r#"{"unexpected": true}"#)]);
    let backend = HttpTextBackend::new(text_config(&server.url)).unwrap();
    assert!(matches!(
        backend.complete(&descriptor_request()),
        Err(PromptError::Protocol(_))
    ));
}

fn image_request(width: u32, height: u32) -> scenegen::backend::ImageRequest {
    GenerationParams {
        width,
        height,
        ..GenerationParams::default()
    }
    .request("a car on a wet road".into(), 42)
}

fn image_config(url: &str) -> HttpImageConfig {
    HttpImageConfig {
        url: url.to_string(),
        auth_env: None,
        timeout_secs: 5,
        retry: RetryPolicy {
            max_attempts: 3,
            backoff_ms: 1,
        },
    }
}

fn png_of(width: u32, height: u32) -> Vec<u8> {
    MockImageBackend::render(&image_request(width, height))
}

#[test]
fn image_backend_accepts_raw_bytes() {
    let server = serve(vec![StubResponse {
        status: 200,
        content_type: "image/png",
        body: png_of(64, 64),
    }]);
    let backend = HttpImageBackend::new(image_config(&server.url)).unwrap();
    let bytes = backend.generate(&image_request(64, 64)).unwrap();
    let img = image::load_from_memory(&bytes).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
}

#[test]
fn image_backend_accepts_base64_json() {
    use base64::Engine;
    let b64 = base64::engine::general_purpose::STANDARD.encode(png_of(64, 64));
    let server = serve(vec![StubResponse::json(200, &format!(r#"{{"images": ["{b64}"]}}"#))]);
    let backend = HttpImageBackend::new(image_config(&server.url)).unwrap();
    assert!(backend.generate(&image_request(64, 64)).is_ok());
}

#[test]
fn image_backend_rejects_dimension_mismatch() {
    let server = serve(vec![StubResponse {
        status: 200,
        content_type: "image/png",
        body: png_of(32, 32),
    }]);
    let backend = HttpImageBackend::new(image_config(&server.url)).unwrap();
    match backend.generate(&image_request(64, 64)) {
        Err(BackendError::Validation(message)) => assert!(message.contains("32x32"), "{message}"),
        other => panic!("expected dimension validation error, got {other:?}"),
    }
}

#[test]
fn image_backend_rejects_undecodable_payload() {
    let server = serve(vec![StubResponse {
        status: 200,
        content_type: "image/png",
        body: b"not an image".to_vec(),
    }]);
    let backend = HttpImageBackend::new(image_config(&server.url)).unwrap();
    assert!(matches!(
        backend.generate(&image_request(64, 64)),
        Err(BackendError::Protocol(_))
    ));
}

#[test]
fn request_image_counts_attempts_across_retries() {
    let server = serve(vec![
        StubResponse::json(500, "{}"),
        StubResponse::json(500, "{}"),
        StubResponse {
            status: 200,
            content_type: "image/png",
            body: png_of(64, 64),
        },
    ]);
    let backend = HttpImageBackend::new(image_config(&server.url)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    let (artifact, attempts) =
        request_image(&backend, &image_request(64, 64), dir.path(), "000000_car_rainy_daytime.png")
            .unwrap();
    assert_eq!(attempts, 3);
    assert!(dir.path().join(&artifact.path).exists());
    assert_eq!(artifact.width, 64);
}

#[test]
fn request_image_reports_exhaustion() {
    let server = serve(vec![
        StubResponse::json(500, "{}"),
        StubResponse::json(500, "{}"),
        StubResponse::json(500, "{}"),
    ]);
    let backend = HttpImageBackend::new(image_config(&server.url)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    let failure = request_image(&backend, &image_request(64, 64), dir.path(), "x.png").unwrap_err();
    assert_eq!(failure.attempts, 3);
    assert_eq!(server.hits.load(Ordering::SeqCst), 3);
    // no file and no temp file materialized
    assert_eq!(std::fs::read_dir(dir.path().join("images")).unwrap().count(), 0);
}
